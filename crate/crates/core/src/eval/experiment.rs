//! End-to-end experiment runner: builds the library, describes and indexes
//! the database, ranks every query with each method and collects metrics and
//! analysis tables.
//!
//! The report holds no timings, so reruns with the same inputs produce the
//! same bytes whatever the thread count. Timings go to a separate file.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bow::{train_vocabulary, BowIndex, KMeansConfig};
use crate::descriptor::{describe_all, Role, SceneDescriptor};
use crate::error::{Error, Result};
use crate::eval::metrics::{self, RelevanceSpec};
use crate::eval::world::SyntheticWorld;
use crate::index::{build_index, InvertedIndex};
use crate::io::{Collection, LoadedManifest};
use crate::knn::{error_profile_for_images, ErrorProfile};
use crate::library::{build_library, ExperienceLibrary, VocabFilter, VocabKind};
use crate::matcher::{explanation_histogram, rank, top_subimage_pairs, RankedResult};
use crate::model::{DomainLabel, ImageRecord, MinerConfig, PyramidConfig, Season};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Nearest-neighbour descriptors with the spatial pyramid kernel.
    CdSd,
    /// Same descriptors, whole-image matching only (`L = 0`).
    NbnnSd,
    /// k-means vocabulary, tf-idf, cosine.
    Tfidf,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::CdSd, Method::NbnnSd, Method::Tfidf];

    pub fn token(&self) -> &'static str {
        match self {
            Method::CdSd => "cd-sd",
            Method::NbnnSd => "nbnn-sd",
            Method::Tfidf => "tfidf",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "cd-sd" => Ok(Method::CdSd),
            "nbnn-sd" | "nbnn" => Ok(Method::NbnnSd),
            "tfidf" | "tf-idf" => Ok(Method::Tfidf),
            _ => Err(Error::InvalidConfig(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub miner: MinerConfig,
    pub pyramid: PyramidConfig,
    pub vocab: VocabKind,
    /// Seasons and routes the library must avoid; derived from the query and
    /// database images when absent.
    pub exclude_seasons: Option<Vec<Season>>,
    pub exclude_routes: Option<Vec<u32>>,
    pub kmeans: KMeansConfig,
    /// Sub-image pairs reported per query.
    pub top_subimages: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            miner: MinerConfig::default(),
            pyramid: PyramidConfig::default(),
            vocab: VocabKind::Cd,
            exclude_seasons: None,
            exclude_routes: None,
            kmeans: KMeansConfig::default(),
            top_subimages: 5,
        }
    }
}

/// Images plus ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub library: Vec<ImageRecord>,
    /// Database images followed by distractors.
    pub database: Vec<ImageRecord>,
    pub queries: Vec<ImageRecord>,
    pub relevance: RelevanceSpec,
    /// Per-query database subsets; queries without one see the whole database.
    pub subsets: BTreeMap<u64, Vec<u64>>,
}

impl Dataset {
    pub fn from_world(world: SyntheticWorld) -> Self {
        Self {
            library: world.library,
            database: world.database,
            queries: world.queries,
            relevance: world.relevance,
            subsets: BTreeMap::new(),
        }
    }

    pub fn from_manifest(manifest: &LoadedManifest) -> Result<Self> {
        Ok(Self {
            library: manifest.load_collection(Collection::Library)?,
            database: manifest.load_collection(Collection::Database)?,
            queries: manifest.load_collection(Collection::Query)?,
            relevance: RelevanceSpec::from_manifest(&manifest.manifest),
            subsets: manifest
                .manifest
                .db_subset
                .iter()
                .map(|s| (s.query_id, s.database_ids.clone()))
                .collect(),
        })
    }

    pub fn vocab_filter(&self, kind: VocabKind, seasons: Option<&[Season]>, routes: Option<&[u32]>) -> VocabFilter {
        let used = || self.queries.iter().chain(&self.database).map(|im| im.domain);
        let mut s: Vec<Season> = seasons.map_or_else(|| used().map(|d| d.season).collect(), <[_]>::to_vec);
        let mut r: Vec<u32> = routes.map_or_else(|| used().map(|d| d.route).collect(), <[_]>::to_vec);
        s.sort_unstable();
        s.dedup();
        r.sort_unstable();
        r.dedup();
        VocabFilter::new(kind, s, r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub library_images_available: usize,
    pub library_images: usize,
    pub library_features: usize,
    pub library_fingerprint: String,
    pub vocabulary: VocabFilter,
    pub database_images: usize,
    pub queries: usize,
    pub queries_with_subset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: u64,
    pub domain: DomainLabel,
    pub best_rank: usize,
    pub db_size: usize,
    pub normalized_rank: f64,
    pub average_precision: f64,
    /// Best-ranked image ids.
    pub top: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub anr: Option<f64>,
    pub map: Option<f64>,
    pub queries: Vec<QueryResult>,
}

/// ANR and mAP of one method over the queries of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub query_domain: DomainLabel,
    pub method: Method,
    pub queries: usize,
    pub anr: f64,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    /// `filtered` (the experiment library) or `full` (every library image).
    pub library: String,
    pub features: usize,
    pub mean: Option<f64>,
    pub deciles: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageRow {
    pub query_domain: DomainLabel,
    pub library_domain: DomainLabel,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubimageRow {
    pub query_id: u64,
    pub image_id: u64,
    pub position: usize,
    pub level: u8,
    pub cell: u32,
    pub bounds: [f64; 4],
    pub similarity: f64,
    pub contribution: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    pub methods: Vec<MethodReport>,
    pub grid: Vec<GridCell>,
    pub error_profiles: Vec<ProfileSummary>,
    pub usage: Vec<UsageRow>,
    pub subimages: Vec<SubimageRow>,
}

impl Report {
    pub fn method(&self, method: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: Method,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    pub mean_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub library_ms: f64,
    pub describe_database_ms: f64,
    pub index_ms: f64,
    pub describe_queries_ms: f64,
    pub vocabulary_ms: f64,
    /// Per-query ranking time.
    pub methods: Vec<MethodTiming>,
}

/// Everything an experiment produces.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub report: Report,
    pub timing: Timing,
    pub rankings: Vec<(Method, Vec<RankedResult>)>,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn timing_of(method: Method, mut samples: Vec<f64>) -> MethodTiming {
    samples.sort_by(f64::total_cmp);
    let pick = |p: f64| {
        if samples.is_empty() {
            0.0
        } else {
            let i = ((p * samples.len() as f64).ceil() as usize).clamp(1, samples.len()) - 1;
            samples[i]
        }
    };
    MethodTiming {
        method,
        p50_ms: pick(0.5),
        p90_ms: pick(0.9),
        p99_ms: pick(0.99),
        max_ms: samples.last().copied().unwrap_or(0.0),
        mean_ms: metrics::mean(&samples).unwrap_or(0.0),
    }
}

fn summarize(name: &str, profile: &ErrorProfile) -> ProfileSummary {
    ProfileSummary {
        library: name.into(),
        features: profile.len(),
        mean: profile.mean(),
        deciles: profile.deciles(),
    }
}

struct Sd {
    index: InvertedIndex,
    queries: Vec<SceneDescriptor>,
}

/// Runs every configured method over the dataset. With `out_dir`, writes
/// `report.json`, the CSV tables, per-method rankings and `timing.json`.
pub fn run_experiment(dataset: &Dataset, cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Outcome> {
    cfg.miner.validate()?;
    cfg.pyramid.validate()?;
    if cfg.methods.is_empty() {
        return Err(Error::InvalidConfig("no methods selected".into()));
    }
    let db_ids: Vec<u64> = dataset.database.iter().map(|d| d.image_id).collect();
    dataset.relevance.validate(&db_ids)?;
    for q in &dataset.queries {
        if dataset.relevance.relevant(q.image_id).is_none() {
            return Err(Error::EmptyRelevance { query_id: q.image_id });
        }
    }
    let mut timing = Timing::default();

    let t = Instant::now();
    let filter = dataset.vocab_filter(cfg.vocab, cfg.exclude_seasons.as_deref(), cfg.exclude_routes.as_deref());
    let library = filter.build(&dataset.library)?;
    timing.library_ms = ms(t);
    let used_images = dataset.library.iter().filter(|im| filter.accepts(&im.domain)).count();

    let needs_sd = cfg.methods.iter().any(|m| matches!(m, Method::CdSd | Method::NbnnSd));
    let sd = if needs_sd {
        let t = Instant::now();
        let db = describe_all(&dataset.database, &library, &cfg.miner, &cfg.pyramid, Role::Database)?;
        timing.describe_database_ms = ms(t);
        let t = Instant::now();
        let index = build_index(&library, &db)?;
        timing.index_ms = ms(t);
        let t = Instant::now();
        let queries = describe_all(&dataset.queries, &library, &cfg.miner, &cfg.pyramid, Role::Query)?;
        timing.describe_queries_ms = ms(t);
        Some(Sd { index, queries })
    } else {
        None
    };
    let bow = if cfg.methods.contains(&Method::Tfidf) {
        let t = Instant::now();
        let vocab = train_vocabulary(&library, &cfg.kmeans)?;
        let index = BowIndex::build(&dataset.database, &vocab)?;
        timing.vocabulary_ms = ms(t);
        Some((vocab, index))
    } else {
        None
    };

    let mut methods = Vec::new();
    let mut rankings = Vec::new();
    for &method in &cfg.methods {
        let ranked: Vec<(RankedResult, f64)> = (0..dataset.queries.len())
            .into_par_iter()
            .map(|i| {
                let t = Instant::now();
                let r = match method {
                    Method::CdSd => rank(&sd.as_ref().expect("described").queries[i], &sd.as_ref().expect("described").index)?,
                    Method::NbnnSd => {
                        let s = sd.as_ref().expect("described");
                        rank(&s.queries[i].coarsened(0)?, &s.index)?
                    }
                    Method::Tfidf => {
                        let (vocab, index) = bow.as_ref().expect("trained");
                        index.rank(&dataset.queries[i], vocab)
                    }
                };
                let r = match dataset.subsets.get(&r.query_id) {
                    Some(ids) => r.restricted_to(ids),
                    None => r,
                };
                Ok((r, ms(t)))
            })
            .collect::<Result<_>>()?;
        let (ranked, times): (Vec<RankedResult>, Vec<f64>) = ranked.into_iter().unzip();
        timing.methods.push(timing_of(method, times));

        let queries = ranked
            .iter()
            .zip(&dataset.queries)
            .map(|(r, q)| {
                Ok(QueryResult {
                    query_id: q.image_id,
                    domain: q.domain,
                    best_rank: metrics::best_rank(r, &dataset.relevance)?,
                    db_size: r.len(),
                    normalized_rank: metrics::normalized_rank(r, &dataset.relevance, r.len())?,
                    average_precision: metrics::average_precision(r, &dataset.relevance)?,
                    top: r.entries.iter().take(5).map(|e| e.image_id).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let nr: Vec<f64> = queries.iter().map(|q| q.normalized_rank).collect();
        let ap: Vec<f64> = queries.iter().map(|q| q.average_precision).collect();
        methods.push(MethodReport {
            method,
            anr: metrics::mean(&nr),
            map: metrics::mean(&ap),
            queries,
        });
        rankings.push((method, ranked));
    }

    let mut grid = Vec::new();
    for m in &methods {
        let mut by_domain: BTreeMap<DomainLabel, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for q in &m.queries {
            let e = by_domain.entry(q.domain).or_default();
            e.0.push(q.normalized_rank);
            e.1.push(q.average_precision);
        }
        for (domain, (nr, ap)) in by_domain {
            grid.push(GridCell {
                query_domain: domain,
                method: m.method,
                queries: nr.len(),
                anr: metrics::mean(&nr).unwrap_or(0.0),
                map: metrics::mean(&ap).unwrap_or(0.0),
            });
        }
    }

    let mut error_profiles = vec![summarize(
        "filtered",
        &error_profile_for_images(&dataset.queries, &library, cfg.miner.exclude_same_source)?,
    )];
    if used_images < dataset.library.len() {
        let full = build_library(&dataset.library, None)?;
        error_profiles.push(summarize(
            "full",
            &error_profile_for_images(&dataset.queries, &full, cfg.miner.exclude_same_source)?,
        ));
    }

    let mut usage = Vec::new();
    let mut subimages = Vec::new();
    if let Some(sd) = &sd {
        let hist = explanation_histogram(&sd.queries, &library);
        for (q, row) in &hist.counts {
            for (l, &count) in row {
                usage.push(UsageRow {
                    query_domain: *q,
                    library_domain: *l,
                    count,
                });
            }
        }
        if cfg.methods.contains(&Method::CdSd) && cfg.top_subimages > 0 {
            let (_, ranked) = rankings.iter().find(|(m, _)| *m == Method::CdSd).expect("ranked");
            for (qd, r) in sd.queries.iter().zip(ranked) {
                let rel = dataset.relevance.relevant(qd.image_id).expect("validated");
                let Some(best) = r.entries.iter().find(|e| rel.contains(&e.image_id)) else {
                    continue;
                };
                let pairs = top_subimage_pairs(qd, best.image_id, &sd.index, cfg.top_subimages)?;
                for (i, p) in pairs.into_iter().enumerate() {
                    subimages.push(SubimageRow {
                        query_id: qd.image_id,
                        image_id: best.image_id,
                        position: i + 1,
                        level: p.level,
                        cell: p.cell,
                        bounds: p.bounds,
                        similarity: p.similarity,
                        contribution: p.contribution,
                    });
                }
            }
        }
    }

    let report = Report {
        config: cfg.clone(),
        dataset: DatasetSummary {
            library_images_available: dataset.library.len(),
            library_images: used_images,
            library_features: library.len(),
            library_fingerprint: format!("{:016x}", library.fingerprint()),
            vocabulary: filter,
            database_images: dataset.database.len(),
            queries: dataset.queries.len(),
            queries_with_subset: dataset.queries.iter().filter(|q| dataset.subsets.contains_key(&q.image_id)).count(),
        },
        methods,
        grid,
        error_profiles,
        usage,
        subimages,
    };
    let outcome = Outcome { report, timing, rankings };
    if let Some(dir) = out_dir {
        write_outputs(&outcome, &library, dataset, cfg, dir)?;
    }
    Ok(outcome)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, contents).map_err(|e| Error::io(p, e))
}

fn write_outputs(outcome: &Outcome, library: &ExperienceLibrary, dataset: &Dataset, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report = &outcome.report;
    write(dir, "report.json", &report.to_json())?;
    write(
        dir,
        "timing.json",
        &(serde_json::to_string_pretty(&outcome.timing).expect("timing serializes") + "\n"),
    )?;

    let methods: Vec<Method> = report.methods.iter().map(|m| m.method).collect();
    let header: String = methods.iter().map(|m| format!(",{m}")).collect();
    let domains: Vec<DomainLabel> = {
        let mut d: Vec<DomainLabel> = report.grid.iter().map(|c| c.query_domain).collect();
        d.sort_unstable();
        d.dedup();
        d
    };
    for (name, pick) in [("anr_grid.csv", 0), ("map_grid.csv", 1)] {
        let mut s = format!("query_season,query_route{header}\n");
        for d in &domains {
            let _ = write!(s, "{},{}", d.season, d.route);
            for m in &methods {
                match report.grid.iter().find(|c| c.query_domain == *d && c.method == *m) {
                    Some(c) => {
                        let _ = write!(s, ",{}", if pick == 0 { c.anr } else { c.map });
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s.push_str("all,");
        for m in &report.methods {
            let v = if pick == 0 { m.anr } else { m.map };
            s.push(',');
            if let Some(v) = v {
                let _ = write!(s, "{v}");
            }
        }
        s.push('\n');
        write(dir, name, &s)?;
    }

    let mut s = String::from("method,query_id,query_season,query_route,best_rank,db_size,normalized_rank,average_precision\n");
    for m in &report.methods {
        for q in &m.queries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                m.method, q.query_id, q.domain.season, q.domain.route, q.best_rank, q.db_size, q.normalized_rank, q.average_precision
            );
        }
    }
    write(dir, "per_query.csv", &s)?;

    for (method, ranked) in &outcome.rankings {
        let mut s = String::from("query_id\trank\timage_id\tscore\n");
        for r in ranked {
            for (i, e) in r.entries.iter().enumerate() {
                let _ = writeln!(s, "{}\t{}\t{}\t{}", r.query_id, i + 1, e.image_id, e.score);
            }
        }
        write(dir, &format!("rankings_{method}.tsv"), &s)?;
    }

    let mut s = String::from("library,rank_percent,distance\n");
    let full;
    let mut libs: Vec<(&str, &ExperienceLibrary)> = vec![("filtered", library)];
    if report.error_profiles.len() > 1 {
        full = build_library(&dataset.library, None)?;
        libs.push(("full", &full));
    }
    for (name, lib) in libs {
        let profile = error_profile_for_images(&dataset.queries, lib, cfg.miner.exclude_same_source)?;
        for (p, d) in profile.points() {
            let _ = writeln!(s, "{name},{p},{d}");
        }
    }
    write(dir, "error_profile.csv", &s)?;

    let mut s = String::from("query_season,query_route,library_season,library_route,count\n");
    for u in &report.usage {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            u.query_domain.season, u.query_domain.route, u.library_domain.season, u.library_domain.route, u.count
        );
    }
    write(dir, "usage.csv", &s)?;

    let mut s = String::from("query_id,image_id,position,level,cell,x0,y0,x1,y1,similarity,contribution\n");
    for r in &report.subimages {
        let [x0, y0, x1, y1] = r.bounds;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{x0},{y0},{x1},{y1},{},{}",
            r.query_id, r.image_id, r.position, r.level, r.cell, r.similarity, r.contribution
        );
    }
    write(dir, "subimages.csv", &s)
}
