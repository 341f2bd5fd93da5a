//! The experience library: raw descriptors of every feature in a set of
//! library images, flattened into a contiguous 1-based ID space.

use std::fmt;
use std::hash::Hasher;
use std::path::Path;
use std::str::FromStr;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::model::{DomainLabel, ImageRecord, Season};

/// 1-based identifier of a library feature. Zero is never a valid ID.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LibraryId(pub u32);

impl LibraryId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    #[inline]
    pub fn from_index(index: usize) -> Self {
        LibraryId(index as u32 + 1)
    }
}

impl fmt::Display for LibraryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Where a library feature came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: u64,
    pub domain: DomainLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperienceLibrary {
    dim: usize,
    /// Row-major `V x dim`; row `i` holds `z[i + 1]`.
    data: Vec<f32>,
    provenance: Vec<Provenance>,
    fingerprint: u64,
}

impl ExperienceLibrary {
    /// Assembles a library from already-flattened parts.
    pub fn from_parts(dim: usize, data: Vec<f32>, provenance: Vec<Provenance>) -> Result<Self> {
        if provenance.is_empty() {
            return Err(Error::EmptyLibrary);
        }
        if dim == 0 {
            return Err(Error::InvalidConfig("descriptor dimension must be positive".into()));
        }
        if data.len() != dim * provenance.len() {
            return Err(Error::InvalidConfig(format!(
                "descriptor block holds {} values, expected {} x {}",
                data.len(),
                provenance.len(),
                dim
            )));
        }
        if provenance.len() > u32::MAX as usize - 1 {
            return Err(Error::InvalidConfig("library exceeds the 32-bit ID space".into()));
        }
        let fingerprint = fingerprint(dim, &data);
        Ok(Self {
            dim,
            data,
            provenance,
            fingerprint,
        })
    }

    /// Number of library features, `V`.
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn descriptor(&self, id: LibraryId) -> &[f32] {
        let start = id.index() * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn provenance(&self, id: LibraryId) -> &Provenance {
        &self.provenance[id.index()]
    }

    pub fn provenances(&self) -> &[Provenance] {
        &self.provenance
    }

    /// The flat `V x dim` descriptor block.
    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    pub fn ids(&self) -> impl Iterator<Item = LibraryId> {
        (0..self.len()).map(LibraryId::from_index)
    }

    /// Mask of library rows whose source image id is in `image_ids`.
    pub fn source_mask(&self, image_ids: &[u64]) -> Vec<bool> {
        self.provenance
            .iter()
            .map(|p| image_ids.contains(&p.image_id))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut enc = Encoder::with_capacity(32 + self.len() * 13 + self.data.len() * 4);
        enc.bytes(LIBRARY_MAGIC);
        enc.u32(LIBRARY_VERSION);
        enc.u64(self.len() as u64);
        enc.u32(self.dim as u32);
        enc.u64(self.fingerprint);
        for p in &self.provenance {
            enc.u64(p.image_id);
            enc.u8(p.domain.season.code());
            enc.u32(p.domain.route);
        }
        for &v in &self.data {
            enc.f32(v);
        }
        enc.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = binio::read_file(path)?;
        let mut dec = Decoder::new(&bytes, path.display().to_string());
        dec.magic(LIBRARY_MAGIC)?;
        let version = dec.u32()?;
        if version != LIBRARY_VERSION {
            return Err(dec.format_error(format!("unsupported library version {version}")));
        }
        let count = dec.u64()? as usize;
        let dim = dec.u32()? as usize;
        let stored = dec.u64()?;
        let mut provenance = Vec::with_capacity(count.min(dec.remaining() / 13));
        for _ in 0..count {
            let image_id = dec.u64()?;
            let code = dec.u8()?;
            let season = Season::from_code(code)
                .ok_or_else(|| dec.format_error(format!("bad season code {code}")))?;
            let route = dec.u32()?;
            provenance.push(Provenance {
                image_id,
                domain: DomainLabel::new(season, route),
            });
        }
        let mut data = Vec::with_capacity((count * dim).min(dec.remaining() / 4));
        for _ in 0..count * dim {
            data.push(dec.f32()?);
        }
        dec.finish()?;
        let lib = Self::from_parts(dim, data, provenance)?;
        if lib.fingerprint != stored {
            return Err(Error::FingerprintMismatch {
                expected: stored,
                found: lib.fingerprint,
            });
        }
        Ok(lib)
    }
}

const LIBRARY_MAGIC: &[u8; 4] = b"XDLB";
const LIBRARY_VERSION: u32 = 1;

/// 64-bit FNV-1a over `(V, d, descriptor bytes)`, all little-endian.
pub fn fingerprint(dim: usize, data: &[f32]) -> u64 {
    let count = if dim == 0 { 0 } else { data.len() / dim };
    let mut h = FnvHasher::default();
    h.write(&(count as u64).to_le_bytes());
    h.write(&(dim as u32).to_le_bytes());
    for v in data {
        h.write(&v.to_le_bytes());
    }
    h.finish()
}

/// Flattens the features of every image accepted by `filter` into a library,
/// in input order.
pub fn build_library(
    images: &[ImageRecord],
    filter: Option<&dyn Fn(&DomainLabel) -> bool>,
) -> Result<ExperienceLibrary> {
    let mut dim = None;
    for image in images {
        for f in &image.features {
            match dim {
                None => dim = Some(f.dim()),
                Some(d) if d != f.dim() => {
                    return Err(Error::DimensionMismatch {
                        image_id: image.image_id,
                        expected: d,
                        found: f.dim(),
                    })
                }
                _ => {}
            }
        }
    }
    let dim = dim.ok_or(Error::EmptyLibrary)?;
    let mut data = Vec::new();
    let mut provenance = Vec::new();
    for image in images {
        if !filter.is_none_or(|accept| accept(&image.domain)) {
            continue;
        }
        for f in &image.features {
            data.extend_from_slice(&f.desc);
            provenance.push(Provenance {
                image_id: image.image_id,
                domain: image.domain,
            });
        }
    }
    ExperienceLibrary::from_parts(dim, data, provenance)
}

/// Which slice of the library domains to keep relative to the target domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    /// Seasons and routes both differ from the targets.
    Cd,
    /// Seasons differ; any route.
    Cs,
    /// Routes differ; any season.
    Cr,
    /// Everything.
    Full,
}

impl FromStr for VocabKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cd" => Ok(VocabKind::Cd),
            "cs" => Ok(VocabKind::Cs),
            "cr" => Ok(VocabKind::Cr),
            "full" => Ok(VocabKind::Full),
            _ => Err(Error::InvalidConfig(format!("unknown vocabulary kind {s:?}"))),
        }
    }
}

impl fmt::Display for VocabKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VocabKind::Cd => "cd",
            VocabKind::Cs => "cs",
            VocabKind::Cr => "cr",
            VocabKind::Full => "full",
        })
    }
}

/// Vocabulary variant expressed as a predicate over domain labels.
///
/// `seasons` and `routes` list the domains of the query/database images; the
/// variant decides which of them a library image must avoid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabFilter {
    pub kind: VocabKind,
    pub seasons: Vec<Season>,
    pub routes: Vec<u32>,
}

impl VocabFilter {
    pub fn new(kind: VocabKind, seasons: Vec<Season>, routes: Vec<u32>) -> Self {
        Self {
            kind,
            seasons,
            routes,
        }
    }

    pub fn full() -> Self {
        Self::new(VocabKind::Full, Vec::new(), Vec::new())
    }

    pub fn accepts(&self, label: &DomainLabel) -> bool {
        let season_ok = !self.seasons.contains(&label.season);
        let route_ok = !self.routes.contains(&label.route);
        match self.kind {
            VocabKind::Cd => season_ok && route_ok,
            VocabKind::Cs => season_ok,
            VocabKind::Cr => route_ok,
            VocabKind::Full => true,
        }
    }

    pub fn build(&self, images: &[ImageRecord]) -> Result<ExperienceLibrary> {
        build_library(images, Some(&|d: &DomainLabel| self.accepts(d)))
    }
}
