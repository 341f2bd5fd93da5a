//! Synthetic cross-domain worlds.
//!
//! Descriptors are drawn from a shared set of prototypes ("things that look
//! alike everywhere") plus a per-feature instance offset. Each route is a
//! sequence of places; consecutive places share part of their features,
//! shifted sideways. A domain (season, route) renders a place through a
//! season transform: per-component gain, additive noise, dropout, random
//! replacement and keypoint jitter. Every random draw is made whether or not
//! it ends up used, so worlds that differ only in a rate or sigma share their
//! random numbers.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::RelevanceSpec;
use crate::io::{write_descriptor_file, DatasetManifest, ManifestImage, RelevanceEntry};
use crate::library::{VocabFilter, VocabKind};
use crate::model::{DomainLabel, Feature, ImageRecord, Point, Season};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    /// Additive Gaussian noise per component, byte scale.
    pub noise_sigma: f64,
    /// Gains are drawn once per season from `1 +- gain_spread`.
    pub gain_spread: f64,
    pub dropout: f64,
    pub replacement: f64,
    /// Gaussian keypoint jitter in normalized image units.
    pub jitter: f64,
}

impl DomainTransform {
    pub const IDENTITY: DomainTransform = DomainTransform {
        noise_sigma: 0.0,
        gain_spread: 0.0,
        dropout: 0.0,
        replacement: 0.0,
        jitter: 0.0,
    };

    fn validate(&self) -> Result<()> {
        let rates = [("dropout", self.dropout), ("replacement", self.replacement)];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidConfig(format!("{name} rate {r} outside [0, 1]")));
            }
        }
        let scales = [
            ("noise sigma", self.noise_sigma),
            ("gain spread", self.gain_spread),
            ("jitter", self.jitter),
        ];
        for (name, v) in scales {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.gain_spread >= 1.0 {
            return Err(Error::InvalidConfig("gain spread must be below 1".into()));
        }
        Ok(())
    }
}

impl Default for DomainTransform {
    fn default() -> Self {
        Self {
            noise_sigma: 30.0,
            gain_spread: 0.15,
            dropout: 0.1,
            replacement: 0.1,
            jitter: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeasonTransform {
    pub season: Season,
    pub transform: DomainTransform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldConfig {
    /// Places on the query/database route.
    pub num_places: usize,
    pub num_queries: usize,
    pub features_per_image: usize,
    pub dim: usize,
    pub prototypes: usize,
    /// Per-component spread of feature instances around their prototype.
    pub instance_spread: f64,
    pub routes: u32,
    /// Places on each other route.
    pub library_places: usize,
    /// Fraction of a place's features carried over from the previous place.
    pub place_overlap: f64,
    pub query_domain: DomainLabel,
    pub database_domain: DomainLabel,
    /// Applied to every season without an override.
    pub transform: DomainTransform,
    #[serde(default)]
    pub season_transforms: Vec<SeasonTransform>,
    /// Adds, for every query place, a copy of its database image with
    /// keypoint positions shuffled among its features.
    pub layout_distractors: bool,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            num_places: 120,
            num_queries: 100,
            features_per_image: 60,
            dim: 16,
            prototypes: 48,
            instance_spread: 35.0,
            routes: 3,
            library_places: 120,
            place_overlap: 0.3,
            query_domain: DomainLabel::new(Season::Su, 0),
            database_domain: DomainLabel::new(Season::Wi, 0),
            transform: DomainTransform::default(),
            season_transforms: Vec::new(),
            layout_distractors: false,
            seed: 0,
        }
    }
}

impl SyntheticWorldConfig {
    /// Same world with every transform replaced by the identity.
    pub fn noiseless(mut self) -> Self {
        self.transform = DomainTransform::IDENTITY;
        self.season_transforms.clear();
        self
    }

    pub fn transform_for(&self, season: Season) -> DomainTransform {
        self.season_transforms
            .iter()
            .find(|s| s.season == season)
            .map_or(self.transform, |s| s.transform)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.num_places == 0 {
            return bad("world needs at least one place");
        }
        if self.num_queries > self.num_places {
            return bad("more queries than places");
        }
        if self.features_per_image == 0 || self.dim == 0 || self.prototypes == 0 {
            return bad("features per image, dimension and prototypes must be positive");
        }
        if self.routes == 0 || self.query_domain.route >= self.routes || self.database_domain.route >= self.routes {
            return bad("query and database routes must be below the route count");
        }
        if self.query_domain.route != self.database_domain.route {
            return bad("query and database must share a route");
        }
        if self.query_domain.season == Season::Other || self.database_domain.season == Season::Other {
            return bad("query and database seasons must be calendar seasons");
        }
        if !(0.0..=1.0).contains(&self.place_overlap) {
            return bad("place overlap outside [0, 1]");
        }
        if !(self.instance_spread >= 0.0 && self.instance_spread.is_finite()) {
            return bad("instance spread must be finite and >= 0");
        }
        self.transform.validate()?;
        for s in &self.season_transforms {
            s.transform.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    /// One traversal per (season, route), every domain included.
    pub library: Vec<ImageRecord>,
    /// Database images followed by distractors.
    pub database: Vec<ImageRecord>,
    pub queries: Vec<ImageRecord>,
    pub relevance: RelevanceSpec,
    pub query_domain: DomainLabel,
    pub database_domain: DomainLabel,
}

impl SyntheticWorld {
    /// Library filter excluding the query and database domains as `kind`
    /// prescribes.
    pub fn vocab_filter(&self, kind: VocabKind) -> VocabFilter {
        let mut seasons = vec![self.query_domain.season, self.database_domain.season];
        seasons.dedup();
        let mut routes = vec![self.query_domain.route, self.database_domain.route];
        routes.dedup();
        VocabFilter::new(kind, seasons, routes)
    }
}

const LIBRARY_ID_BASE: u64 = 2_000_000;
const QUERY_ID_BASE: u64 = 1_000_000;

const TAG_PROTOTYPES: u64 = 1;
const TAG_GAIN: u64 = 2;
const TAG_PLACES: u64 = 3;
const TAG_RENDER: u64 = 4;
const TAG_SELECT: u64 = 5;
const TAG_SHUFFLE: u64 = 6;
const TAG_IDS: u64 = 7;

const ROLE_LIBRARY: u64 = 0;
const ROLE_DATABASE: u64 = 1;
const ROLE_QUERY: u64 = 2;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let s = parts
        .iter()
        .fold(mix(seed), |acc, &p| mix(acc ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    ChaCha8Rng::seed_from_u64(s)
}

#[derive(Clone)]
struct BaseFeature {
    pos: Point,
    desc: Vec<f64>,
}

struct Generator<'a> {
    cfg: &'a SyntheticWorldConfig,
    prototypes: Vec<Vec<f64>>,
}

impl Generator<'_> {
    fn fresh_feature(&self, rng: &mut ChaCha8Rng) -> BaseFeature {
        let p = rng.random_range(0..self.prototypes.len());
        let desc = self.prototypes[p]
            .iter()
            .map(|&c| c + self.cfg.instance_spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let pos = Point::new(rng.random::<f32>(), rng.random::<f32>());
        BaseFeature { pos, desc }
    }

    /// Base features of every place on a route.
    fn route(&self, route: u32, places: usize) -> Vec<Vec<BaseFeature>> {
        let mut rng = stream(self.cfg.seed, &[TAG_PLACES, route as u64]);
        let n = self.cfg.features_per_image;
        let mut out: Vec<Vec<BaseFeature>> = Vec::with_capacity(places);
        for j in 0..places {
            let mut feats = Vec::with_capacity(n);
            for f in 0..n {
                let carry = rng.random::<f64>() < self.cfg.place_overlap;
                let fresh = self.fresh_feature(&mut rng);
                let inherited = j > 0 && carry && {
                    let prev = &out[j - 1][f];
                    prev.pos.x >= 0.15
                };
                if inherited {
                    let prev = &out[j - 1][f];
                    feats.push(BaseFeature {
                        pos: Point::new(prev.pos.x - 0.15, prev.pos.y),
                        desc: prev.desc.clone(),
                    });
                } else {
                    feats.push(fresh);
                }
            }
            out.push(feats);
        }
        out
    }

    fn gains(&self, season: Season) -> Vec<f64> {
        let spread = self.cfg.transform_for(season).gain_spread;
        let mut rng = stream(self.cfg.seed, &[TAG_GAIN, season.code() as u64]);
        (0..self.cfg.dim)
            .map(|_| 1.0 + spread * rng.random_range(-1.0..=1.0))
            .collect()
    }

    fn render(&self, base: &[BaseFeature], domain: DomainLabel, gains: &[f64], role: u64, place: usize) -> Vec<Feature> {
        let t = self.cfg.transform_for(domain.season);
        let mut rng = stream(
            self.cfg.seed,
            &[TAG_RENDER, role, domain.season.code() as u64, domain.route as u64, place as u64],
        );
        let mut out = Vec::with_capacity(base.len());
        for b in base {
            let drop = rng.random::<f64>() < t.dropout;
            let replace = rng.random::<f64>() < t.replacement;
            let substitute = self.fresh_feature(&mut rng);
            let noise: Vec<f64> = (0..self.cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
            let jx: f64 = rng.sample(StandardNormal);
            let jy: f64 = rng.sample(StandardNormal);
            if drop {
                continue;
            }
            let src = if replace { &substitute } else { b };
            let desc = src
                .desc
                .iter()
                .zip(gains)
                .zip(&noise)
                .map(|((&v, &g), &z)| (g * v + t.noise_sigma * z).clamp(0.0, 255.0) as f32)
                .collect();
            let x = (src.pos.x as f64 + t.jitter * jx).clamp(0.0, 1.0) as f32;
            let y = (src.pos.y as f64 + t.jitter * jy).clamp(0.0, 1.0) as f32;
            out.push(Feature::new(Point::new(x, y), desc));
        }
        out
    }
}

/// Generates library, database and query images with single-twin relevance:
/// query `j` is relevant to the database image of place `j` only.
pub fn generate_world(cfg: &SyntheticWorldConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, &[TAG_PROTOTYPES]);
    let prototypes = (0..cfg.prototypes)
        .map(|_| (0..cfg.dim).map(|_| rng.random_range(48.0..208.0)).collect())
        .collect();
    let g = Generator { cfg, prototypes };
    let main_route = cfg.query_domain.route;
    let routes: Vec<Vec<Vec<BaseFeature>>> = (0..cfg.routes)
        .map(|r| {
            let places = if r == main_route { cfg.num_places } else { cfg.library_places };
            g.route(r, places)
        })
        .collect();
    let gains: Vec<Vec<f64>> = Season::CALENDAR.iter().map(|&s| g.gains(s)).collect();
    let gains_of = |s: Season| &gains[Season::CALENDAR.iter().position(|&c| c == s).unwrap_or(0)];

    let mut library = Vec::new();
    for &season in &Season::CALENDAR {
        for r in 0..cfg.routes {
            let domain = DomainLabel::new(season, r);
            for (j, base) in routes[r as usize].iter().enumerate() {
                let id = LIBRARY_ID_BASE + library.len() as u64;
                let features = g.render(base, domain, gains_of(season), ROLE_LIBRARY, j);
                library.push(ImageRecord::new(id, domain, features).with_place(r as u64 * 1_000_000 + j as u64));
            }
        }
    }

    let mut selected: Vec<usize> = rand::seq::index::sample(&mut stream(cfg.seed, &[TAG_SELECT]), cfg.num_places, cfg.num_queries)
        .into_vec();
    selected.sort_unstable();

    let main = &routes[main_route as usize];
    let db_domain = cfg.database_domain;
    let mut db_images: Vec<(u64, Vec<Feature>)> = main
        .iter()
        .enumerate()
        .map(|(j, base)| (j as u64, g.render(base, db_domain, gains_of(db_domain.season), ROLE_DATABASE, j)))
        .collect();
    let num_real = db_images.len();
    if cfg.layout_distractors {
        for &j in &selected {
            let mut features = db_images[j].1.clone();
            let mut positions: Vec<Point> = features.iter().map(|f| f.pos).collect();
            positions.shuffle(&mut stream(cfg.seed, &[TAG_SHUFFLE, j as u64]));
            for (f, p) in features.iter_mut().zip(positions) {
                f.pos = p;
            }
            db_images.push((u64::MAX, features));
        }
    }
    let mut ids: Vec<u64> = (1..=db_images.len() as u64).collect();
    ids.shuffle(&mut stream(cfg.seed, &[TAG_IDS]));
    let database: Vec<ImageRecord> = db_images
        .into_iter()
        .zip(&ids)
        .enumerate()
        .map(|(i, ((place, features), &id))| {
            let im = ImageRecord::new(id, db_domain, features);
            if i < num_real {
                im.with_place(place)
            } else {
                im
            }
        })
        .collect();

    let mut relevance = RelevanceSpec::new();
    let queries = selected
        .iter()
        .map(|&j| {
            let id = QUERY_ID_BASE + j as u64;
            relevance.insert(id, [ids[j]]);
            let features = g.render(&main[j], cfg.query_domain, gains_of(cfg.query_domain.season), ROLE_QUERY, j);
            ImageRecord::new(id, cfg.query_domain, features).with_place(j as u64)
        })
        .collect();

    Ok(SyntheticWorld {
        library,
        database,
        queries,
        relevance,
        query_domain: cfg.query_domain,
        database_domain: cfg.database_domain,
    })
}

/// Writes descriptor files under `dir` and returns the manifest, also saved
/// as `dir/manifest.toml`. Distractors (database images without a place) go
/// to the distractor collection.
pub fn write_world(world: &SyntheticWorld, dir: &Path) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::default();
    manifest.notes.push("synthetic world".into());
    let dim = world
        .library
        .iter()
        .chain(&world.database)
        .chain(&world.queries)
        .find_map(|im| im.features.first())
        .map_or(0, |f| f.dim());
    for (sub, images) in [("library", &world.library), ("database", &world.database), ("query", &world.queries)] {
        let sub_dir = dir.join(sub);
        std::fs::create_dir_all(&sub_dir).map_err(|e| Error::io(&sub_dir, e))?;
        for im in images.iter() {
            let rel = Path::new(sub).join(format!("{}.xdsc", im.image_id));
            write_descriptor_file(&dir.join(&rel), dim, &im.features)?;
            let entry = ManifestImage {
                image_id: im.image_id,
                path: rel,
                season: im.domain.season.token().into(),
                route: im.domain.route,
                place_id: im.place_id,
            };
            match sub {
                "library" => manifest.library.push(entry),
                "query" => manifest.query.push(entry),
                _ if im.place_id.is_none() => manifest.distractor.push(entry),
                _ => manifest.database.push(entry),
            }
        }
    }
    for q in world.relevance.queries() {
        manifest.relevance.push(RelevanceEntry {
            query_id: q,
            relevant: world.relevance.relevant(q).map(|s| s.iter().copied().collect()),
            ..Default::default()
        });
    }
    manifest.save(&dir.join("manifest.toml"))?;
    Ok(manifest)
}
