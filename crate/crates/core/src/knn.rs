//! Exact k-nearest-neighbour mining against the experience library.
//!
//! Distances are squared Euclidean, evaluated in `f64` by summing
//! per-component squared differences in component order. That sequential sum
//! is the canonical distance: every returned `sq_distance` is bit-identical to
//! [`squared_distance`].
//!
//! The scan itself runs a vectorizable `f32` kernel over blocks of queries and
//! library rows. Its relative error against the canonical value is bounded by
//! roughly `(d + 2)` units in the last place, so every row whose approximate
//! distance falls within a slightly widened k-th-best threshold is re-scored
//! canonically before the final selection. Rows outside the widened threshold
//! provably cannot enter the top k, so the result is exact.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::library::{ExperienceLibrary, LibraryId};
use crate::model::{Feature, ImageRecord};

/// One mined neighbour.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: LibraryId,
    pub sq_distance: f64,
}

/// The exact k nearest library features of one input feature, ordered by
/// ascending squared distance and then ascending library ID.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NNExplanation {
    pub entries: Vec<Neighbor>,
}

impl NNExplanation {
    pub fn nearest(&self) -> Option<&Neighbor> {
        self.entries.first()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Canonical squared Euclidean distance.
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut sum = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        sum += d * d;
    }
    sum
}

/// `max(D0^2 - sq_distance, 0)`.
#[inline]
pub fn truncated_similarity(sq_distance: f64, d0: f64) -> f64 {
    (d0 * d0 - sq_distance).max(0.0)
}

/// Total order on neighbours: ascending distance, then ascending ID.
pub fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.sq_distance
        .total_cmp(&b.sq_distance)
        .then_with(|| a.id.cmp(&b.id))
}

/// Mines the `k` nearest library features of a single feature.
///
/// `excluded_sources` lists source image ids whose library features must
/// never be returned.
pub fn mine(
    feature: &Feature,
    library: &ExperienceLibrary,
    k: usize,
    excluded_sources: &[u64],
) -> Result<NNExplanation> {
    let mask = exclusion_mask(library, excluded_sources);
    let mut out = mine_descriptors(&[feature.desc.as_slice()], library, k, mask.as_deref())?;
    Ok(out.pop().unwrap_or_default())
}

/// Mines every feature of `image`, honouring same-source exclusion when asked.
pub fn mine_image(
    image: &ImageRecord,
    library: &ExperienceLibrary,
    k: usize,
    exclude_same_source: bool,
) -> Result<Vec<NNExplanation>> {
    let mask = if exclude_same_source {
        exclusion_mask(library, &[image.image_id])
    } else {
        None
    };
    let descs: Vec<&[f32]> = image.features.iter().map(|f| f.desc.as_slice()).collect();
    mine_descriptors(&descs, library, k, mask.as_deref()).map_err(|e| match e {
        Error::DimensionMismatch { expected, found, .. } => Error::DimensionMismatch {
            image_id: image.image_id,
            expected,
            found,
        },
        other => other,
    })
}

/// Row mask for library features originating from any of `sources`; `None`
/// when nothing is excluded.
pub fn exclusion_mask(library: &ExperienceLibrary, sources: &[u64]) -> Option<Vec<bool>> {
    if sources.is_empty() {
        return None;
    }
    let mask = library.source_mask(sources);
    mask.iter().any(|&m| m).then_some(mask)
}

const QUERY_BLOCK: usize = 16;
const ROW_TILE: usize = 64;

/// Batch form of [`mine`]; results are in input order. `mask[i]` set means
/// library row `i` (ID `i + 1`) is excluded.
pub fn mine_descriptors(
    descs: &[&[f32]],
    library: &ExperienceLibrary,
    k: usize,
    mask: Option<&[bool]>,
) -> Result<Vec<NNExplanation>> {
    let dim = library.dim();
    if let Some(bad) = descs.iter().find(|d| d.len() != dim) {
        return Err(Error::DimensionMismatch {
            image_id: 0,
            expected: dim,
            found: bad.len(),
        });
    }
    let available = match mask {
        Some(m) => m.iter().filter(|&&x| !x).count(),
        None => library.len(),
    };
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if descs.is_empty() {
        return Ok(Vec::new());
    }
    if k > available {
        return Err(Error::KTooLarge { k, available });
    }
    let blocks: Vec<Vec<NNExplanation>> = descs
        .par_chunks(QUERY_BLOCK)
        .map(|block| mine_block(block, library, k, mask))
        .collect();
    Ok(blocks.into_iter().flatten().collect())
}

fn mine_block(
    queries: &[&[f32]],
    library: &ExperienceLibrary,
    k: usize,
    mask: Option<&[bool]>,
) -> Vec<NNExplanation> {
    let v = library.len();
    let dim = library.dim();
    let mut approx = vec![0f32; queries.len() * v];
    scan(queries, library.raw(), dim, &mut approx);
    if let Some(mask) = mask {
        for row in approx.chunks_exact_mut(v) {
            for (a, &m) in row.iter_mut().zip(mask) {
                if m {
                    *a = f32::INFINITY;
                }
            }
        }
    }
    // Relative error bound of the f32 kernel, doubled.
    let margin = (dim as f64 + 4.0) * f32::EPSILON as f64;
    queries
        .iter()
        .zip(approx.chunks_exact(v))
        .map(|(q, row)| {
            let kth = kth_smallest(row, k, mask) as f64;
            let threshold = kth * (1.0 + margin) / (1.0 - margin) + 1e-30;
            let mut candidates: Vec<Neighbor> = row
                .iter()
                .enumerate()
                .filter(|&(i, &a)| (a as f64) <= threshold && !mask.is_some_and(|m| m[i]))
                .map(|(i, _)| {
                    let id = LibraryId::from_index(i);
                    Neighbor {
                        id,
                        sq_distance: squared_distance(q, library.descriptor(id)),
                    }
                })
                .collect();
            candidates.sort_by(neighbor_order);
            candidates.truncate(k);
            NNExplanation {
                entries: candidates,
            }
        })
        .collect()
}

/// k-th smallest non-excluded approximate distance.
fn kth_smallest(row: &[f32], k: usize, mask: Option<&[bool]>) -> f32 {
    let live = |i: usize| !mask.is_some_and(|m| m[i]);
    if k <= 32 {
        let mut best: Vec<f32> = Vec::with_capacity(k + 1);
        for (i, &a) in row.iter().enumerate() {
            if best.len() == k && a >= best[k - 1] {
                continue;
            }
            if !live(i) {
                continue;
            }
            let at = best.partition_point(|&b| b <= a);
            best.insert(at, a);
            best.truncate(k);
        }
        best[k - 1]
    } else {
        let mut live_vals: Vec<f32> = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| live(i))
            .map(|(_, &a)| a)
            .collect();
        let (_, kth, _) = live_vals.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
        *kth
    }
}

fn scan(queries: &[&[f32]], lib: &[f32], dim: usize, out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected above.
            unsafe { scan_avx2(queries, lib, dim, out) };
            return;
        }
    }
    scan_portable(queries, lib, dim, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn scan_avx2(queries: &[&[f32]], lib: &[f32], dim: usize, out: &mut [f32]) {
    scan_portable(queries, lib, dim, out)
}

#[inline(always)]
fn scan_portable(queries: &[&[f32]], lib: &[f32], dim: usize, out: &mut [f32]) {
    let v = lib.len() / dim;
    for tile_start in (0..v).step_by(ROW_TILE) {
        let tile_end = (tile_start + ROW_TILE).min(v);
        for (qi, q) in queries.iter().enumerate() {
            let row_out = &mut out[qi * v..(qi + 1) * v];
            for r in tile_start..tile_end {
                row_out[r] = approx_sq_dist(q, &lib[r * dim..(r + 1) * dim]);
            }
        }
    }
}

#[inline(always)]
fn approx_sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 16];
    let ca = a.chunks_exact(16);
    let cb = b.chunks_exact(16);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..16 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    let mut tail = 0f32;
    for (x, y) in ta.iter().zip(tb) {
        let d = x - y;
        tail += d * d;
    }
    acc.iter().sum::<f32>() + tail
}

/// Sorted nearest-neighbour distances, the "approximation error" of
/// explaining each input feature by its best library feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorProfile {
    /// Euclidean distances, ascending.
    pub distances: Vec<f64>,
}

impl ErrorProfile {
    pub fn from_explanations(explanations: &[NNExplanation]) -> Self {
        let mut distances: Vec<f64> = explanations
            .iter()
            .filter_map(|e| e.nearest().map(|n| n.sq_distance.sqrt()))
            .collect();
        distances.sort_by(f64::total_cmp);
        Self { distances }
    }

    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    /// `(rank_percent, distance)` points, rank percent in `(0, 100]`.
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = self.distances.len() as f64;
        self.distances
            .iter()
            .enumerate()
            .map(move |(i, &d)| ((i + 1) as f64 * 100.0 / n, d))
    }

    /// Nearest-rank percentile, `p` in `(0, 100]`.
    pub fn percentile(&self, p: f64) -> Option<f64> {
        if self.distances.is_empty() {
            return None;
        }
        let n = self.distances.len();
        let rank = ((p / 100.0) * n as f64).ceil().clamp(1.0, n as f64) as usize;
        Some(self.distances[rank - 1])
    }

    /// Values at 10%, 20%, ..., 100%.
    pub fn deciles(&self) -> Vec<f64> {
        (1..=10)
            .filter_map(|i| self.percentile(i as f64 * 10.0))
            .collect()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.distances.is_empty())
            .then(|| self.distances.iter().sum::<f64>() / self.distances.len() as f64)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("rank_percent\tdistance\n");
        for (r, d) in self.points() {
            s.push_str(&format!("{r:.6}\t{d:.6}\n"));
        }
        s
    }
}

/// Error profile of a flat feature list against the library.
pub fn approx_error_profile(features: &[Feature], library: &ExperienceLibrary) -> Result<ErrorProfile> {
    let descs: Vec<&[f32]> = features.iter().map(|f| f.desc.as_slice()).collect();
    let ex = mine_descriptors(&descs, library, 1, None)?;
    Ok(ErrorProfile::from_explanations(&ex))
}

/// Error profile over whole images, optionally excluding each image's own
/// library features.
pub fn error_profile_for_images(
    images: &[ImageRecord],
    library: &ExperienceLibrary,
    exclude_same_source: bool,
) -> Result<ErrorProfile> {
    let mut all = Vec::new();
    for image in images {
        all.extend(mine_image(image, library, 1, exclude_same_source)?);
    }
    Ok(ErrorProfile::from_explanations(&all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::{build_library, Provenance};
    use crate::model::{DomainLabel, Point, Season};

    fn toy_library() -> ExperienceLibrary {
        let data = vec![0.0, 0.0, 100.0, 0.0, 0.0, 100.0, 300.0, 300.0];
        let prov = (0..4)
            .map(|i| Provenance {
                image_id: i,
                domain: DomainLabel::new(Season::Au, 1),
            })
            .collect();
        ExperienceLibrary::from_parts(2, data, prov).unwrap()
    }

    fn feat(x: f32, y: f32) -> Feature {
        Feature::new(Point::new(0.5, 0.5), vec![x, y])
    }

    #[test]
    fn toy_two_nearest() {
        let lib = toy_library();
        let ex = mine(&feat(10.0, 0.0), &lib, 2, &[]).unwrap();
        let got: Vec<_> = ex.entries.iter().map(|n| (n.id.0, n.sq_distance)).collect();
        assert_eq!(got, vec![(1, 100.0), (2, 8100.0)]);
    }

    #[test]
    fn identity_match() {
        let lib = toy_library();
        let ex = mine(&feat(0.0, 100.0), &lib, 1, &[]).unwrap();
        assert_eq!(ex.entries, vec![Neighbor { id: LibraryId(3), sq_distance: 0.0 }]);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let lib = toy_library();
        // (50, 50) is equidistant from z[2] and z[3] (5000) and from z[1] (5000).
        let ex = mine(&feat(50.0, 50.0), &lib, 3, &[]).unwrap();
        let ids: Vec<_> = ex.entries.iter().map(|n| n.id.0).collect();
        assert_eq!(ids, vec![1, 2, 3]);
        assert!(ex.entries.iter().all(|n| n.sq_distance == 5000.0));
    }

    #[test]
    fn exclusion_and_capacity() {
        let lib = toy_library();
        // Sources 0 and 1 hold z[1] and z[2].
        let ex = mine(&feat(10.0, 0.0), &lib, 2, &[0, 1]).unwrap();
        let ids: Vec<_> = ex.entries.iter().map(|n| n.id.0).collect();
        assert_eq!(ids, vec![3, 4]);
        assert!(matches!(
            mine(&feat(10.0, 0.0), &lib, 3, &[0, 1]),
            Err(Error::KTooLarge { k: 3, available: 2 })
        ));
        assert!(matches!(
            mine(&feat(10.0, 0.0), &lib, 5, &[]),
            Err(Error::KTooLarge { k: 5, available: 4 })
        ));
    }

    #[test]
    fn dimension_is_checked() {
        let lib = toy_library();
        let f = Feature::new(Point::new(0.0, 0.0), vec![1.0, 2.0, 3.0]);
        assert!(matches!(mine(&f, &lib, 1, &[]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn truncated_similarity_examples() {
        assert_eq!(truncated_similarity(100.0, 200.0), 39900.0);
        assert_eq!(truncated_similarity(0.0, 200.0), 40000.0);
        assert_eq!(truncated_similarity(40001.0, 200.0), 0.0);
        assert_eq!(truncated_similarity(40000.0, 200.0), 0.0);
    }

    #[test]
    fn error_profile_of_library_members_is_zero() {
        let lib = toy_library();
        let feats: Vec<_> = lib.ids().map(|id| {
            let d = lib.descriptor(id);
            feat(d[0], d[1])
        }).collect();
        let p = approx_error_profile(&feats, &lib).unwrap();
        assert_eq!(p.distances, vec![0.0; 4]);
    }

    #[test]
    fn error_profile_of_toy_queries() {
        let lib = toy_library();
        let feats = vec![feat(10.0, 0.0), feat(0.0, 5.0), feat(290.0, 300.0), feat(100.0, 30.0)];
        let p = approx_error_profile(&feats, &lib).unwrap();
        // Brute force: nearest squared distances 100, 25, 100, 900.
        assert_eq!(p.distances, vec![5.0, 10.0, 10.0, 30.0]);
        let pts: Vec<_> = p.points().collect();
        assert_eq!(pts[0], (25.0, 5.0));
        assert_eq!(pts[3], (100.0, 30.0));
        assert_eq!(p.percentile(50.0), Some(10.0));
        assert_eq!(p.deciles().len(), 10);
    }

    #[test]
    fn same_source_exclusion_removes_self_matches() {
        let images: Vec<_> = (0..3)
            .map(|i| {
                ImageRecord::new(
                    i,
                    DomainLabel::new(Season::Sp, 0),
                    vec![feat(i as f32 * 10.0, 0.0), feat(i as f32 * 10.0, 1.0)],
                )
            })
            .collect();
        let lib = build_library(&images, None).unwrap();
        let with_self = error_profile_for_images(&images, &lib, false).unwrap();
        assert!(with_self.distances.iter().all(|&d| d == 0.0));
        let without = error_profile_for_images(&images, &lib, true).unwrap();
        assert!(without.distances.iter().all(|&d| d > 0.0));
    }
}
