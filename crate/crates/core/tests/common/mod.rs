//! Independent reference implementations shared by the integration tests:
//! brute-force k-NN and a dense scorer that materializes V-dimensional
//! feature vectors.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdsd_core::descriptor::describe_all;
use xdsd_core::{
    build_index, build_library, rank, DomainLabel, Feature, ImageRecord, MinerConfig, Point, PyramidConfig,
    RankedResult, Role, Season,
};

pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s
}

/// `(id, squared distance)` of the `k` nearest rows, 1-based ids, ties by id.
pub fn brute_knn(q: &[f32], rows: &[Vec<f32>], k: usize, skip: &[bool]) -> Vec<(u32, f64)> {
    let mut all: Vec<(u32, f64)> = rows
        .iter()
        .enumerate()
        .filter(|(i, _)| !skip.get(*i).copied().unwrap_or(false))
        .map(|(i, r)| (i as u32 + 1, sq_dist(q, r)))
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Row-major cell of a normalized position on a `2^level` grid, with the
/// upper edge folded into the last cell.
pub fn cell(p: Point, level: u8) -> usize {
    let side = 1usize << level;
    let g = |v: f32| ((v as f64 * side as f64).floor().max(0.0) as usize).min(side - 1);
    g(p.y) * side + g(p.x)
}

pub struct DenseFeature {
    pub pos: Point,
    pub v: Vec<f64>,
}

/// Per-level similarity of a query against one database image: for every
/// query feature, the best `max_v x[v] * y[v]` over database features sharing
/// its cell at that level, summed over query features.
pub fn dense_levels(query: &[DenseFeature], db: &[DenseFeature], levels: u8) -> Vec<f64> {
    (0..=levels)
        .map(|l| {
            let mut total = 0.0;
            for q in query {
                let mut best = 0.0f64;
                for d in db.iter().filter(|d| cell(d.pos, l) == cell(q.pos, l)) {
                    let s = q.v.iter().zip(&d.v).map(|(a, b)| a * b).fold(0.0f64, f64::max);
                    best = best.max(s);
                }
                total += best;
            }
            total
        })
        .collect()
}

pub fn kernel(levels: &[f64]) -> f64 {
    let top = levels.len() - 1;
    if top == 0 {
        return levels[0];
    }
    let mut s = levels[0] / 2f64.powi(top as i32);
    for (l, &v) in levels.iter().enumerate().skip(1) {
        s += v / 2f64.powi((top - l + 1) as i32);
    }
    s
}

pub fn new_matches_kernel(levels: &[f64]) -> f64 {
    let top = levels.len() - 1;
    let mut s = levels[top];
    for l in 0..top {
        s += (levels[l] - levels[l + 1]) / 2f64.powi((top - l) as i32);
    }
    s
}

/// Ranking order: score descending, image id ascending.
pub fn order(mut scored: Vec<(u64, f64)>) -> Vec<u64> {
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.into_iter().map(|s| s.0).collect()
}

pub struct Instance {
    pub library: Vec<Vec<f32>>,
    pub database: Vec<ImageRecord>,
    pub query: ImageRecord,
    pub miner: MinerConfig,
    pub levels: u8,
}

fn position(rng: &mut ChaCha8Rng) -> f32 {
    if rng.random::<f64>() < 0.15 {
        [0.0, 0.25, 0.5, 0.75, 1.0][rng.random_range(0..5)]
    } else {
        rng.random::<f32>()
    }
}

fn features(rng: &mut ChaCha8Rng, n: usize, dim: usize, library: &[Vec<f32>]) -> Vec<Feature> {
    (0..n)
        .map(|_| {
            let base = &library[rng.random_range(0..library.len())];
            let desc = base.iter().map(|&v| (v + rng.random_range(-60.0f32..60.0)).max(0.0)).collect();
            let _ = dim;
            Feature::new(Point::new(position(rng), position(rng)), desc)
        })
        .collect()
}

/// Small random world: at most 10 database images, N <= 50, V <= 500.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = [2usize, 4, 8][rng.random_range(0..3)];
    let v = rng.random_range(10..=500);
    let library: Vec<Vec<f32>> = (0..v)
        .map(|_| (0..dim).map(|_| rng.random_range(0..300) as f32).collect())
        .collect();
    let k = rng.random_range(1..=10usize.min(v));
    let k_prime = rng.random_range(1..=k.min(3));
    let d0 = [100.0, 200.0, 300.0][rng.random_range(0..3)];
    let levels = rng.random_range(0..=2u8);
    let n_db = rng.random_range(1..=10);
    let domain = DomainLabel::new(Season::Wi, 0);
    let mut ids: Vec<u64> = (1..=40).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    let database = (0..n_db)
        .map(|i| {
            let n = rng.random_range(0..=50);
            ImageRecord::new(ids[i], domain, features(&mut rng, n, dim, &library))
        })
        .collect();
    let n = rng.random_range(0..=50);
    let query = ImageRecord::new(1000, DomainLabel::new(Season::Su, 0), features(&mut rng, n, dim, &library));
    Instance {
        library,
        database,
        query,
        miner: MinerConfig {
            k,
            k_prime,
            d0,
            exclude_same_source: false,
        },
        levels,
    }
}

fn dense_query(inst: &Instance) -> Vec<DenseFeature> {
    let v = inst.library.len();
    inst.query
        .features
        .iter()
        .map(|f| {
            let mut x = vec![0.0; v];
            for (id, d) in brute_knn(&f.desc, &inst.library, inst.miner.k, &[]) {
                x[id as usize - 1] = (inst.miner.d0 * inst.miner.d0 - d).max(0.0);
            }
            DenseFeature { pos: f.pos, v: x }
        })
        .collect()
}

fn dense_db(inst: &Instance, image: &ImageRecord) -> Vec<DenseFeature> {
    let v = inst.library.len();
    image
        .features
        .iter()
        .map(|f| {
            let mut y = vec![0.0; v];
            for (id, _) in brute_knn(&f.desc, &inst.library, inst.miner.k_prime, &[]) {
                y[id as usize - 1] = 1.0;
            }
            DenseFeature { pos: f.pos, v: y }
        })
        .collect()
}

/// Dense per-image level vectors, in database order.
pub fn oracle_levels(inst: &Instance, levels: u8) -> Vec<(u64, Vec<f64>)> {
    let q = dense_query(inst);
    inst.database
        .iter()
        .map(|im| (im.image_id, dense_levels(&q, &dense_db(inst, im), levels)))
        .collect()
}

/// Engine ranking of the instance at depth `query_levels` against an index
/// of depth `inst.levels`.
pub fn engine_rank(inst: &Instance, query_levels: u8) -> RankedResult {
    let lib_image = ImageRecord::new(
        99_999,
        DomainLabel::new(Season::Au, 1),
        inst.library.iter().map(|d| Feature::new(Point::new(0.5, 0.5), d.clone())).collect(),
    );
    let lib = build_library(&[lib_image], None).unwrap();
    let pyr = PyramidConfig::new(inst.levels).unwrap();
    let db = describe_all(&inst.database, &lib, &inst.miner, &pyr, Role::Database).unwrap();
    let index = build_index(&lib, &db).unwrap();
    let q = describe_all(std::slice::from_ref(&inst.query), &lib, &inst.miner, &pyr, Role::Query)
        .unwrap()
        .pop()
        .unwrap();
    let q = if query_levels == inst.levels { q } else { q.coarsened(query_levels).unwrap() };
    rank(&q, &index).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}
