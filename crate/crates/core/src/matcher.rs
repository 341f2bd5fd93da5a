//! Image-to-class scoring of a query descriptor against the inverted file.
//!
//! For a query feature `f` and a database feature `g`, the similarity is the
//! largest query weight over library IDs the two share. At pyramid level `l`
//! each query feature contributes the best similarity it reaches against any
//! feature of the candidate image lying in the same level-`l` cell; the sum
//! over query features is `I_l`. Because level-`l` cells contain the
//! level-`l+1` cells, `I_0 >= I_1 >= ... >= I_L`. The image score combines
//! the levels with the pyramid match kernel.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::descriptor::{FeatureRecord, SceneDescriptor};
use crate::error::{Error, Result};
use crate::index::InvertedIndex;
use crate::library::ExperienceLibrary;
use crate::model::{cell_bounds, grid_of, DomainLabel, PyramidConfig};

/// Similarity of a query feature and a database feature: max over shared
/// library IDs of the product of their weights, 0 when nothing is shared.
pub fn feature_similarity(query: &FeatureRecord, database: &FeatureRecord) -> f64 {
    let mut best = 0.0f64;
    for q in &query.entries {
        for d in &database.entries {
            if q.id == d.id {
                best = best.max(q.weight * d.weight);
            }
        }
    }
    best
}

/// Pyramid match kernel: `I_0 / 2^L + sum_{l=1}^{L} I_l / 2^(L-l+1)`.
pub fn pyramid_kernel(levels: &[f64], pyr: &PyramidConfig) -> f64 {
    debug_assert_eq!(levels.len(), pyr.levels as usize + 1);
    levels
        .iter()
        .enumerate()
        .map(|(l, &v)| pyr.level_weight(l as u8) * v)
        .sum()
}

/// The same kernel written over new matches per level:
/// `I_L + sum_{l=0}^{L-1} (I_l - I_{l+1}) / 2^(L-l)`.
pub fn pyramid_kernel_new_matches(levels: &[f64]) -> f64 {
    let top = levels.len() - 1;
    let mut k = levels[top];
    for l in 0..top {
        k += (levels[l] - levels[l + 1]) * 0.5f64.powi((top - l) as i32);
    }
    k
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub image_id: u64,
    pub score: f64,
    /// `I_l` for `l = 0..=L`.
    pub levels: Vec<f64>,
}

/// Every database image with its kernel score, best first; ties by ascending
/// image id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: u64,
    pub entries: Vec<RankedEntry>,
}

impl RankedResult {
    /// Sorts `entries` into ranking order.
    pub fn from_unsorted(query_id: u64, mut entries: Vec<RankedEntry>) -> Self {
        entries.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.image_id.cmp(&b.image_id))
        });
        Self { query_id, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn order(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.image_id).collect()
    }

    /// 1-based rank of `image_id`.
    pub fn rank_of(&self, image_id: u64) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.image_id == image_id)
            .map(|p| p + 1)
    }

    /// Keeps only the listed images, preserving order.
    pub fn restricted_to(&self, image_ids: &[u64]) -> Self {
        Self {
            query_id: self.query_id,
            entries: self
                .entries
                .iter()
                .filter(|e| image_ids.contains(&e.image_id))
                .cloned()
                .collect(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("rank\timage_id\tscore\n");
        for (i, e) in self.entries.iter().enumerate() {
            s.push_str(&format!("{}\t{}\t{:.17e}\n", i + 1, e.image_id, e.score));
        }
        s
    }
}

fn check_compatible(query: &SceneDescriptor, index: &InvertedIndex) -> Result<()> {
    if query.library_fingerprint != index.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: index.fingerprint(),
            found: query.library_fingerprint,
        });
    }
    if query.pyramid.levels > index.pyramid().levels {
        return Err(Error::ConfigMismatch(format!(
            "query pyramid depth {} exceeds the index depth {}",
            query.pyramid.levels,
            index.pyramid().levels
        )));
    }
    Ok(())
}

/// Finest level (at most `max_level`) at which two cells, both given as grid
/// coordinates at `depth`, coincide.
#[inline]
fn shared_level(a: (u32, u32), b: (u32, u32), depth: u8, max_level: u8) -> u8 {
    let diff = (a.0 ^ b.0) | (a.1 ^ b.1);
    let bits = (32 - diff.leading_zeros()) as u8;
    (depth - bits).min(max_level)
}

/// Per-query-feature best similarity for each (image, level), gathered by
/// walking the posting lists of the feature's library IDs.
struct FeatureScratch {
    levels: usize,
    best: Vec<f64>,
    touched: Vec<u32>,
    mark: Vec<bool>,
}

impl FeatureScratch {
    fn new(num_images: usize, levels: usize) -> Self {
        Self {
            levels,
            best: vec![0.0; num_images * levels],
            touched: Vec::new(),
            mark: vec![false; num_images],
        }
    }

    /// Fills `best` for one query feature; `only` restricts to one image slot.
    fn gather(&mut self, record: &FeatureRecord, index: &InvertedIndex, max_level: u8, only: Option<u32>) {
        let depth = index.pyramid().levels;
        let side = 1u32 << depth;
        let q = grid_of(record.pos, depth);
        for entry in &record.entries {
            if entry.weight <= 0.0 {
                continue;
            }
            let postings = index.postings(entry.id);
            let postings = match only {
                Some(slot) => {
                    let lo = postings.partition_point(|p| p.image < slot);
                    let hi = postings.partition_point(|p| p.image <= slot);
                    &postings[lo..hi]
                }
                None => postings,
            };
            for p in postings {
                let cell = p.finest_cell as u32;
                let shared = shared_level(q, (cell % side, cell / side), depth, max_level);
                let m = p.image as usize;
                if !self.mark[m] {
                    self.mark[m] = true;
                    self.touched.push(p.image);
                }
                let row = &mut self.best[m * self.levels..m * self.levels + shared as usize + 1];
                for b in row {
                    if entry.weight > *b {
                        *b = entry.weight;
                    }
                }
            }
        }
    }

    fn clear(&mut self) {
        for &m in &self.touched {
            let m = m as usize;
            self.mark[m] = false;
            self.best[m * self.levels..(m + 1) * self.levels].fill(0.0);
        }
        self.touched.clear();
    }
}

/// Per-level similarities `I_l` of the query against every indexed image,
/// indexed by image-table slot.
pub fn level_similarities(query: &SceneDescriptor, index: &InvertedIndex) -> Result<Vec<Vec<f64>>> {
    check_compatible(query, index)?;
    let levels = query.pyramid.levels as usize + 1;
    let n = index.num_images();
    let mut totals = vec![0.0f64; n * levels];
    let mut scratch = FeatureScratch::new(n, levels);
    for record in &query.records {
        scratch.gather(record, index, query.pyramid.levels, None);
        for &m in &scratch.touched {
            let m = m as usize;
            for l in 0..levels {
                totals[m * levels + l] += scratch.best[m * levels + l];
            }
        }
        scratch.clear();
    }
    Ok(totals.chunks_exact(levels).map(|c| c.to_vec()).collect())
}

/// `I_l` for a single candidate image at a single level.
pub fn level_similarity(query: &SceneDescriptor, index: &InvertedIndex, image_id: u64, level: u8) -> Result<f64> {
    if level > query.pyramid.levels {
        return Err(Error::InvalidConfig(format!(
            "level {level} exceeds query pyramid depth {}",
            query.pyramid.levels
        )));
    }
    let slot = index.image_slot(image_id).ok_or(Error::UnknownImage(image_id))?;
    let per_cell = cell_similarities(query, index, slot as u32)?;
    Ok(per_cell[level as usize].iter().sum())
}

/// Ranks every indexed image against the query.
pub fn rank(query: &SceneDescriptor, index: &InvertedIndex) -> Result<RankedResult> {
    let sims = level_similarities(query, index)?;
    let entries = sims
        .into_iter()
        .zip(index.images())
        .map(|(levels, img)| RankedEntry {
            image_id: img.image_id,
            score: pyramid_kernel(&levels, &query.pyramid),
            levels,
        })
        .collect();
    Ok(RankedResult::from_unsorted(query.image_id, entries))
}

/// Contribution of each query cell at each level, `[level][cell]`, for one
/// candidate slot. Summing a level gives `I_l`.
fn cell_similarities(query: &SceneDescriptor, index: &InvertedIndex, slot: u32) -> Result<Vec<Vec<f64>>> {
    check_compatible(query, index)?;
    let top = query.pyramid.levels;
    let levels = top as usize + 1;
    let mut per_cell: Vec<Vec<f64>> = (0..=top)
        .map(|l| vec![0.0; PyramidConfig::cells_at(l)])
        .collect();
    let mut scratch = FeatureScratch::new(index.num_images(), levels);
    let m = slot as usize;
    for record in &query.records {
        scratch.gather(record, index, top, Some(slot));
        for l in 0..=top {
            let cell = crate::model::cell_of(record.pos, l) as usize;
            per_cell[l as usize][cell] += scratch.best[m * levels + l as usize];
        }
        scratch.clear();
    }
    Ok(per_cell)
}

/// One query/database sub-image pair and what it adds to the image score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubimageContribution {
    pub level: u8,
    pub cell: u32,
    /// Normalized `[x0, y0, x1, y1]`.
    pub bounds: [f64; 4],
    /// Unweighted per-cell similarity.
    pub similarity: f64,
    /// Similarity times the level's kernel weight.
    pub contribution: f64,
}

/// The `n` cells (over all levels) contributing most to the kernel score of
/// `image_id`; ties by level, then cell.
pub fn top_subimage_pairs(
    query: &SceneDescriptor,
    image_id: u64,
    index: &InvertedIndex,
    n: usize,
) -> Result<Vec<SubimageContribution>> {
    let slot = index.image_slot(image_id).ok_or(Error::UnknownImage(image_id))?;
    let per_cell = cell_similarities(query, index, slot as u32)?;
    let mut all: Vec<SubimageContribution> = per_cell
        .iter()
        .enumerate()
        .flat_map(|(l, cells)| {
            let l = l as u8;
            let w = query.pyramid.level_weight(l);
            cells.iter().enumerate().map(move |(c, &s)| SubimageContribution {
                level: l,
                cell: c as u32,
                bounds: cell_bounds(c as u32, l),
                similarity: s,
                contribution: w * s,
            })
        })
        .collect();
    all.sort_by(|a, b| {
        b.contribution
            .total_cmp(&a.contribution)
            .then_with(|| a.level.cmp(&b.level))
            .then_with(|| a.cell.cmp(&b.cell))
    });
    all.truncate(n);
    Ok(all)
}

/// How often library features of each domain class explain the features of
/// each query category.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageHistogram {
    /// Query category -> library class -> count.
    pub counts: BTreeMap<DomainLabel, BTreeMap<DomainLabel, u64>>,
}

impl UsageHistogram {
    pub fn is_empty(&self) -> bool {
        self.counts.values().all(|row| row.is_empty())
    }

    pub fn total(&self) -> u64 {
        self.counts.values().flat_map(|r| r.values()).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("query_season,query_route,library_season,library_route,count\n");
        for (q, row) in &self.counts {
            for (l, c) in row {
                s.push_str(&format!("{},{},{},{},{}\n", q.season, q.route, l.season, l.route, c));
            }
        }
        s
    }
}

/// Counts every mined library entry of every query feature, grouped by the
/// query's domain and the library feature's domain.
pub fn explanation_histogram(queries: &[SceneDescriptor], library: &ExperienceLibrary) -> UsageHistogram {
    let mut hist = UsageHistogram::default();
    for q in queries {
        for r in &q.records {
            for e in &r.entries {
                let class = library.provenance(e.id).domain;
                *hist
                    .counts
                    .entry(q.domain)
                    .or_default()
                    .entry(class)
                    .or_insert(0) += 1;
            }
        }
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{Entry, Role};
    use crate::index::build_index;
    use crate::library::{LibraryId, Provenance};
    use crate::model::{cell_of, MinerConfig, Point, Season};

    fn rec(pos: (f32, f32), entries: &[(u32, f64)], levels: u8) -> FeatureRecord {
        let pos = Point::new(pos.0, pos.1);
        FeatureRecord {
            pos,
            finest_cell: cell_of(pos, levels),
            entries: entries.iter().map(|&(i, w)| Entry { id: LibraryId(i), weight: w }).collect(),
        }
    }

    fn library(v: usize) -> ExperienceLibrary {
        let prov = (0..v)
            .map(|i| Provenance {
                image_id: 1000 + i as u64 % 3,
                domain: DomainLabel::new(Season::CALENDAR[i % 4], (i % 3) as u32),
            })
            .collect();
        ExperienceLibrary::from_parts(1, (0..v).map(|i| i as f32).collect(), prov).unwrap()
    }

    fn scene(lib: &ExperienceLibrary, id: u64, role: Role, levels: u8, recs: Vec<FeatureRecord>) -> SceneDescriptor {
        SceneDescriptor {
            image_id: id,
            domain: DomainLabel::new(Season::Sp, 0),
            place_id: None,
            role,
            pyramid: PyramidConfig { levels },
            miner: MinerConfig::default(),
            library_fingerprint: lib.fingerprint(),
            records: recs,
        }
    }

    #[test]
    fn feature_similarity_examples() {
        let q = rec((0.5, 0.5), &[(1, 39900.0), (2, 31900.0)], 2);
        assert_eq!(feature_similarity(&q, &rec((0.5, 0.5), &[(1, 1.0)], 2)), 39900.0);
        assert_eq!(feature_similarity(&q, &rec((0.5, 0.5), &[(2, 1.0), (7, 1.0)], 2)), 31900.0);
        assert_eq!(feature_similarity(&q, &rec((0.5, 0.5), &[(3, 1.0)], 2)), 0.0);
    }

    #[test]
    fn kernel_examples() {
        let pyr = PyramidConfig::default();
        assert_eq!(pyramid_kernel(&[10.0, 6.0, 4.0], &pyr), 6.0);
        assert_eq!(pyramid_kernel_new_matches(&[10.0, 6.0, 4.0]), 6.0);
        assert_eq!(pyramid_kernel(&[7.0], &PyramidConfig { levels: 0 }), 7.0);
        assert_eq!(pyramid_kernel_new_matches(&[7.0]), 7.0);
    }

    #[test]
    fn cell_nesting_controls_level_contributions() {
        let lib = library(10);
        // Query in grid (2,1)@L2, match in grid (3,3)@L2: level-1 cells (1,0) vs (1,1).
        let q = scene(&lib, 1, Role::Query, 2, vec![rec((0.6, 0.3), &[(5, 100.0)], 2)]);
        let db = scene(&lib, 2, Role::Database, 2, vec![rec((0.9, 0.9), &[(5, 1.0)], 2)]);
        let idx = build_index(&lib, &[db]).unwrap();
        assert_eq!(level_similarity(&q, &idx, 2, 0).unwrap(), 100.0);
        assert_eq!(level_similarity(&q, &idx, 2, 1).unwrap(), 0.0);
        assert_eq!(level_similarity(&q, &idx, 2, 2).unwrap(), 0.0);
        let r = rank(&q, &idx).unwrap();
        assert_eq!(r.entries[0].levels, vec![100.0, 0.0, 0.0]);
        assert_eq!(r.entries[0].score, 25.0);
    }

    #[test]
    fn co_located_match_counts_at_every_level() {
        let lib = library(10);
        let q = scene(&lib, 1, Role::Query, 2, vec![rec((0.1, 0.8), &[(3, 50.0), (4, 20.0)], 2)]);
        let db = scene(&lib, 2, Role::Database, 2, vec![rec((0.15, 0.85), &[(4, 1.0), (3, 1.0)], 2)]);
        let idx = build_index(&lib, &[db]).unwrap();
        for l in 0..=2 {
            assert_eq!(level_similarity(&q, &idx, 2, l).unwrap(), 50.0);
        }
        let top = top_subimage_pairs(&q, 2, &idx, 100).unwrap();
        assert_eq!(top.len(), 21);
        assert_eq!((top[0].level, top[0].contribution), (2, 25.0));
        assert_eq!((top[1].level, top[1].contribution), (0, 12.5));
        assert_eq!((top[2].level, top[2].contribution), (1, 12.5));
        assert!(top[3..].iter().all(|c| c.contribution == 0.0));
        assert_eq!(top[2].bounds, [0.0, 0.5, 0.5, 1.0]);
        let sum: f64 = top.iter().map(|c| c.contribution).sum();
        assert_eq!(sum, rank(&q, &idx).unwrap().entries[0].score);
    }

    #[test]
    fn exact_copy_ranks_first_and_empty_query_ties() {
        let lib = library(20);
        let recs = vec![rec((0.2, 0.2), &[(1, 9.0), (2, 8.0)], 2), rec((0.7, 0.9), &[(3, 5.0)], 2)];
        let copy = scene(
            &lib,
            5,
            Role::Database,
            2,
            recs.iter()
                .map(|r| FeatureRecord {
                    entries: r.entries.iter().map(|e| Entry { id: e.id, weight: 1.0 }).collect(),
                    ..r.clone()
                })
                .collect(),
        );
        let others = vec![
            scene(&lib, 2, Role::Database, 2, vec![rec((0.2, 0.2), &[(10, 1.0), (11, 1.0)], 2)]),
            scene(&lib, 9, Role::Database, 2, vec![rec((0.2, 0.2), &[(12, 1.0)], 2)]),
        ];
        let mut dbs = others.clone();
        dbs.push(copy);
        let idx = build_index(&lib, &dbs).unwrap();
        let q = scene(&lib, 100, Role::Query, 2, recs);
        let r = rank(&q, &idx).unwrap();
        assert_eq!(r.order(), vec![5, 2, 9]);
        assert_eq!(r.entries[1].score, 0.0);

        let empty = scene(&lib, 101, Role::Query, 2, vec![]);
        let r = rank(&empty, &idx).unwrap();
        assert_eq!(r.order(), vec![2, 5, 9]);
        assert!(r.entries.iter().all(|e| e.score == 0.0));
    }

    #[test]
    fn rank_checks_fingerprint_and_depth() {
        let lib = library(5);
        let other = library(6);
        let idx = build_index(&lib, &[scene(&lib, 1, Role::Database, 1, vec![])]).unwrap();
        let q = scene(&other, 1, Role::Query, 1, vec![]);
        assert!(matches!(rank(&q, &idx), Err(Error::FingerprintMismatch { .. })));
        let deep = scene(&lib, 1, Role::Query, 2, vec![]);
        assert!(matches!(rank(&deep, &idx), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn histogram_groups_by_domain() {
        let lib = library(12);
        // IDs 3 and 7 both come from AU (index 2 mod 4 -> AU) with routes 2 and 0.
        let mut q = scene(&lib, 1, Role::Query, 0, vec![rec((0.5, 0.5), &[(3, 1.0), (7, 0.0)], 0)]);
        q.domain = DomainLabel::new(Season::Wi, 1);
        let h = explanation_histogram(&[q.clone()], &lib);
        assert_eq!(h.total(), 2);
        let row = &h.counts[&q.domain];
        assert_eq!(row[&DomainLabel::new(Season::Au, 2)], 1);
        assert_eq!(row[&DomainLabel::new(Season::Au, 0)], 1);
        assert!(h.to_csv().contains("WI,1,AU,2,1"));

        let empty = scene(&lib, 2, Role::Query, 0, vec![]);
        assert!(explanation_histogram(&[empty], &lib).is_empty());
    }
}
