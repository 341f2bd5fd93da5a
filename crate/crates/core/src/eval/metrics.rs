//! Ground truth and ranking metrics (ANR, mAP).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::DatasetManifest;
use crate::matcher::RankedResult;

/// Half-width of the default relevance window around a central id.
pub const DEFAULT_WINDOW_RADIUS: u64 = 10;

/// Relevant database image ids per query.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceSpec {
    sets: BTreeMap<u64, BTreeSet<u64>>,
}

impl RelevanceSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: u64, relevant: impl IntoIterator<Item = u64>) {
        self.sets.entry(query_id).or_default().extend(relevant);
    }

    /// Every database id in `[center - radius, center + radius]`.
    pub fn insert_window(&mut self, query_id: u64, center: u64, radius: u64, database_ids: &[u64]) {
        let lo = center.saturating_sub(radius);
        let hi = center.saturating_add(radius);
        let ids = database_ids.iter().copied().filter(|id| (lo..=hi).contains(id));
        self.insert(query_id, ids);
    }

    pub fn relevant(&self, query_id: u64) -> Option<&BTreeSet<u64>> {
        self.sets.get(&query_id)
    }

    pub fn queries(&self) -> impl Iterator<Item = u64> + '_ {
        self.sets.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Builds the spec from manifest relevance entries. Window entries take
    /// the ids present in the database (distractors included), with the
    /// default radius unless one is given.
    pub fn from_manifest(manifest: &DatasetManifest) -> Self {
        let database: Vec<u64> = manifest
            .database
            .iter()
            .chain(&manifest.distractor)
            .map(|d| d.image_id)
            .collect();
        let mut spec = Self::new();
        for r in &manifest.relevance {
            if let Some(ids) = &r.relevant {
                spec.insert(r.query_id, ids.iter().copied());
            }
            if let Some(c) = r.center {
                spec.insert_window(r.query_id, c, r.radius.unwrap_or(DEFAULT_WINDOW_RADIUS), &database);
            }
        }
        spec
    }

    /// Every query has a non-empty set of known database ids.
    pub fn validate(&self, database_ids: &[u64]) -> Result<()> {
        let known: BTreeSet<u64> = database_ids.iter().copied().collect();
        for (&q, set) in &self.sets {
            if set.is_empty() {
                return Err(Error::EmptyRelevance { query_id: q });
            }
            if let Some(&bad) = set.iter().find(|id| !known.contains(id)) {
                return Err(Error::UnknownImage(bad));
            }
        }
        Ok(())
    }

    fn get(&self, query_id: u64) -> Result<&BTreeSet<u64>> {
        match self.sets.get(&query_id) {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(Error::EmptyRelevance { query_id }),
        }
    }
}

/// 1-based rank of the best-placed relevant image.
pub fn best_rank(ranking: &RankedResult, relevance: &RelevanceSpec) -> Result<usize> {
    let set = relevance.get(ranking.query_id)?;
    ranking
        .entries
        .iter()
        .position(|e| set.contains(&e.image_id))
        .map(|p| p + 1)
        .ok_or(Error::EmptyRelevance {
            query_id: ranking.query_id,
        })
}

/// `best_rank / db_size * 100`.
pub fn normalized_rank(ranking: &RankedResult, relevance: &RelevanceSpec, db_size: usize) -> Result<f64> {
    if db_size == 0 {
        return Err(Error::InvalidConfig("database size must be positive".into()));
    }
    Ok(best_rank(ranking, relevance)? as f64 / db_size as f64 * 100.0)
}

/// Averaged normalized rank in percent; `None` without queries.
pub fn anr(rankings: &[RankedResult], relevance: &RelevanceSpec, db_size: usize) -> Result<Option<f64>> {
    let ranks = rankings
        .iter()
        .map(|r| normalized_rank(r, relevance, db_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&ranks))
}

/// Average precision over the relevant images present in the ranking.
pub fn average_precision(ranking: &RankedResult, relevance: &RelevanceSpec) -> Result<f64> {
    let set = relevance.get(ranking.query_id)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, e) in ranking.entries.iter().enumerate() {
        if set.contains(&e.image_id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::EmptyRelevance {
            query_id: ranking.query_id,
        });
    }
    Ok(sum / hits as f64)
}

pub fn mean_average_precision(rankings: &[RankedResult], relevance: &RelevanceSpec) -> Result<Option<f64>> {
    let aps = rankings
        .iter()
        .map(|r| average_precision(r, relevance))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&aps))
}

pub(crate) fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}
