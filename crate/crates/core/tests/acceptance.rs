//! Acceptance suite: one PASS/FAIL line per criterion, run in order.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use xdsd_core::descriptor::{describe_query, Entry, FeatureRecord, Role, SceneDescriptor};
use xdsd_core::eval::experiment::{run_experiment, Dataset, ExperimentConfig, Method};
use xdsd_core::eval::metrics::{anr, average_precision, RelevanceSpec};
use xdsd_core::eval::world::{generate_world, SyntheticWorldConfig};
use xdsd_core::knn::error_profile_for_images;
use xdsd_core::library::Provenance;
use xdsd_core::matcher::{pyramid_kernel, pyramid_kernel_new_matches, RankedEntry};
use xdsd_core::{
    build_index, build_library, cell_of, mine, DomainLabel, Error, ExperienceLibrary, Feature, ImageRecord,
    InvertedIndex, LibraryId, MinerConfig, Point, PyramidConfig, RankedResult, Season, VocabKind,
};
use xdsd_core::bow::KMeansConfig;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn knn_exactness() -> Outcome {
    let start = Instant::now();
    let mut compared = 0usize;
    let mut too_large = 0usize;
    for i in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let dim = [2usize, 8, 128][i as usize % 3];
        let v = rng.random_range(1..=2000usize);
        let value = |rng: &mut ChaCha8Rng| -> f32 {
            match dim {
                2 => rng.random_range(0..8) as f32,
                8 => rng.random_range(0..3) as f32,
                _ => rng.random_range(0.0f32..255.0),
            }
        };
        let mut rows: Vec<Vec<f32>> = Vec::with_capacity(v);
        for r in 0..v {
            if r > 0 && rng.random::<f64>() < 0.1 {
                let dup = rows[rng.random_range(0..r)].clone();
                rows.push(dup);
            } else {
                rows.push((0..dim).map(|_| value(&mut rng)).collect());
            }
        }
        // Up to four source images so that exclusion can be exercised.
        let sources = rng.random_range(1..=4usize.min(v));
        let mut bounds: Vec<usize> = (0..sources - 1).map(|_| rng.random_range(0..=v)).collect();
        bounds.push(0);
        bounds.push(v);
        bounds.sort_unstable();
        let images: Vec<ImageRecord> = bounds
            .windows(2)
            .enumerate()
            .map(|(s, w)| {
                ImageRecord::new(
                    500 + s as u64,
                    DomainLabel::new(Season::Au, 1),
                    rows[w[0]..w[1]].iter().map(|d| Feature::new(Point::new(0.5, 0.5), d.clone())).collect(),
                )
            })
            .collect();
        let lib = build_library(&images, None).map_err(|e| e.to_string())?;
        let excluded: Vec<u64> = if rng.random::<f64>() < 0.3 { vec![500] } else { vec![] };
        let skip: Vec<bool> = (0..v).map(|r| excluded.contains(&500) && r < bounds[1]).collect();
        let available = skip.iter().filter(|&&s| !s).count();
        for _ in 0..5 {
            let q: Vec<f32> = (0..dim).map(|_| value(&mut rng)).collect();
            let k = rng.random_range(1..=v.min(40));
            let feature = Feature::new(Point::new(0.1, 0.9), q.clone());
            match mine(&feature, &lib, k, &excluded) {
                Ok(got) => {
                    let want = brute_knn(&q, &rows, k, &skip);
                    let got: Vec<(u32, f64)> = got.entries.iter().map(|n| (n.id.0, n.sq_distance)).collect();
                    check(got == want, || format!("instance {i}: engine {got:?} != brute force {want:?}"))?;
                    compared += 1;
                }
                Err(Error::KTooLarge { .. }) if k > available => too_large += 1,
                Err(e) => return Err(format!("instance {i}: {e}")),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, || format!("took {secs:.2}s"))?;
    Ok(format!("{compared} searches identical to brute force, {too_large} k>available rejected, {secs:.2}s"))
}

struct PairStats {
    pairs: usize,
    max_rel: f64,
    monotone_violations: usize,
    kernel_gap: f64,
    flat_mismatches: usize,
    depths: [usize; 3],
}

fn oracle_runs() -> Result<PairStats, String> {
    let mut st = PairStats {
        pairs: 0,
        max_rel: 0.0,
        monotone_violations: 0,
        kernel_gap: 0.0,
        flat_mismatches: 0,
        depths: [0; 3],
    };
    for seed in 0..50u64 {
        let mut inst = random_instance(7000 + seed);
        inst.levels = (seed % 3) as u8;
        st.depths[inst.levels as usize] += 1;
        let ranked = engine_rank(&inst, inst.levels);
        let oracle = oracle_levels(&inst, inst.levels);
        for (id, levels) in &oracle {
            let e = ranked
                .entries
                .iter()
                .find(|e| e.image_id == *id)
                .ok_or_else(|| format!("seed {seed}: image {id} missing from ranking"))?;
            st.pairs += 1;
            st.max_rel = st.max_rel.max(rel_err(e.score, kernel(levels)));
            if e.levels.windows(2).any(|w| w[0] < w[1]) {
                st.monotone_violations += 1;
            }
            let pyr = PyramidConfig::new(inst.levels).unwrap();
            let a = pyramid_kernel(&e.levels, &pyr);
            let b = pyramid_kernel_new_matches(&e.levels);
            st.kernel_gap = st.kernel_gap.max((a - b).abs() / a.abs().max(1.0));
        }
        let want = order(oracle.iter().map(|(id, l)| (*id, kernel(l))).collect());
        check(ranked.order() == want, || format!("seed {seed}: ranking differs from the dense scorer"))?;
        let flat = engine_rank(&inst, 0);
        let nbnn = order(oracle_levels(&inst, 0).iter().map(|(id, l)| (*id, l[0])).collect());
        if flat.order() != nbnn {
            st.flat_mismatches += 1;
        }
    }
    Ok(st)
}

fn scoring_oracle() -> Outcome {
    let st = oracle_runs()?;
    check(st.max_rel <= 1e-9, || format!("max relative error {:e}", st.max_rel))?;
    Ok(format!(
        "50 worlds (L=0/1/2: {}/{}/{}), {} image scores, max relative error {:e}, rankings identical",
        st.depths[0], st.depths[1], st.depths[2], st.pairs, st.max_rel
    ))
}

fn pyramid_properties() -> Outcome {
    let st = oracle_runs()?;
    check(st.monotone_violations == 0, || format!("{} pairs with I_l < I_(l+1)", st.monotone_violations))?;
    check(st.kernel_gap <= 1e-12, || format!("kernel forms differ by {:e}", st.kernel_gap))?;
    check(st.flat_mismatches == 0, || format!("{} worlds where L=0 differs from NBNN", st.flat_mismatches))?;
    Ok(format!(
        "{} pairs monotone, kernel forms agree within {:e} (relative), L=0 equals NBNN in all 50 worlds",
        st.pairs, st.kernel_gap
    ))
}

fn ranking_of(query_id: u64, ids: &[u64]) -> RankedResult {
    RankedResult {
        query_id,
        entries: ids
            .iter()
            .enumerate()
            .map(|(i, &id)| RankedEntry {
                image_id: id,
                score: -(i as f64),
                levels: Vec::new(),
            })
            .collect(),
    }
}

fn metric_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ids: Vec<u64> = (1..=1000).collect();
    let mut rankings = Vec::new();
    let mut rel = RelevanceSpec::new();
    for q in 0..1000u64 {
        ids.shuffle(&mut rng);
        rankings.push(ranking_of(q, &ids));
        rel.insert(q, [rng.random_range(1..=1000)]);
    }
    let random_anr = anr(&rankings, &rel, 1000).map_err(|e| e.to_string())?.unwrap();
    check((random_anr - 50.0).abs() <= 3.0, || format!("random ranker ANR {random_anr}"))?;

    let order: Vec<u64> = (1..=1000).collect();
    let r = ranking_of(0, &order);
    for rank in 1..=1000u64 {
        let mut one = RelevanceSpec::new();
        one.insert(0, [rank]);
        let ap = average_precision(&r, &one).map_err(|e| e.to_string())?;
        check(ap == 1.0 / rank as f64, || format!("AP {ap} at rank {rank}"))?;
    }

    let world = generate_world(
        &SyntheticWorldConfig {
            num_places: 40,
            num_queries: 40,
            features_per_image: 40,
            library_places: 40,
            seed: 21,
            ..Default::default()
        }
        .noiseless(),
    )
    .map_err(|e| e.to_string())?;
    let db_size = world.database.len();
    let cfg = ExperimentConfig {
        methods: vec![Method::CdSd],
        ..Default::default()
    };
    let report = run_experiment(&Dataset::from_world(world), &cfg, None).map_err(|e| e.to_string())?.report;
    let m = report.method(Method::CdSd).unwrap();
    let (a, map) = (m.anr.unwrap(), m.map.unwrap());
    check((a - 100.0 / db_size as f64).abs() <= 1e-12, || format!("noiseless ANR {a}"))?;
    check(map == 1.0, || format!("noiseless mAP {map}"))?;
    Ok(format!(
        "random ANR {random_anr:.3}, AP = 1/rank for ranks 1..1000, noiseless ANR {a:.6} = 100/{db_size}, mAP {map}"
    ))
}

fn directional_ordering() -> Outcome {
    let start = Instant::now();
    let world = generate_world(&SyntheticWorldConfig {
        num_places: 120,
        num_queries: 100,
        layout_distractors: true,
        seed: 7,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let sigma = SyntheticWorldConfig::default().transform.noise_sigma;
    let report = run_experiment(&Dataset::from_world(world), &ExperimentConfig::default(), None)
        .map_err(|e| e.to_string())?
        .report;
    let get = |m| report.method(m).and_then(|r| r.anr).unwrap();
    let (cd, nbnn, tfidf) = (get(Method::CdSd), get(Method::NbnnSd), get(Method::Tfidf));
    let secs = start.elapsed().as_secs_f64();
    let summary = format!("sigma {sigma}, ANR cd-sd {cd:.3} / nbnn-sd {nbnn:.3} / tfidf {tfidf:.3}, {secs:.1}s");
    check(cd < nbnn && cd < tfidf && secs < 300.0, || summary.clone())?;
    Ok(summary)
}

fn error_profile_dominance() -> Outcome {
    let mut lines = Vec::new();
    for seed in [1u64, 2, 3] {
        let world = generate_world(&SyntheticWorldConfig {
            num_places: 60,
            num_queries: 40,
            library_places: 60,
            seed,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let cd = world.vocab_filter(VocabKind::Cd).build(&world.library).map_err(|e| e.to_string())?;
        let full = build_library(&world.library, None).map_err(|e| e.to_string())?;
        let pc = error_profile_for_images(&world.queries, &cd, false).map_err(|e| e.to_string())?.deciles();
        let pf = error_profile_for_images(&world.queries, &full, false).map_err(|e| e.to_string())?.deciles();
        check(pc.len() == 10 && pf.len() == 10, || "missing deciles".into())?;
        for (i, (c, f)) in pc.iter().zip(&pf).enumerate() {
            check(c >= f, || format!("seed {seed} decile {}: cross-domain {c} < full {f}", (i + 1) * 10))?;
        }
        lines.push(format!("seed {seed} median {:.1} vs {:.1}", pc[4], pf[4]));
    }
    Ok(format!("cross-domain >= full library at all deciles ({})", lines.join(", ")))
}

fn performance_budget() -> Outcome {
    const V: usize = 100_000;
    const D: usize = 128;
    const N: usize = 300;
    const IMAGES: u64 = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let data: Vec<f32> = (0..V * D).map(|_| rng.random_range(0.0f32..255.0)).collect();
    let provenance = vec![
        Provenance {
            image_id: 0,
            domain: DomainLabel::new(Season::Au, 2)
        };
        V
    ];
    let lib = ExperienceLibrary::from_parts(D, data, provenance).map_err(|e| e.to_string())?;
    let pyr = PyramidConfig::default();
    let miner = MinerConfig::default();

    // Database descriptors with random explanations; mining the database is
    // not part of the budget.
    let databases: Vec<SceneDescriptor> = (1..=IMAGES)
        .map(|id| SceneDescriptor {
            image_id: id,
            domain: DomainLabel::new(Season::Wi, 0),
            place_id: None,
            role: Role::Database,
            pyramid: pyr,
            miner,
            library_fingerprint: lib.fingerprint(),
            records: (0..N)
                .map(|_| {
                    let pos = Point::new(rng.random(), rng.random());
                    let mut ids: Vec<u32> = Vec::new();
                    while ids.len() < miner.k_prime {
                        let id = rng.random_range(1..=V as u32);
                        if !ids.contains(&id) {
                            ids.push(id);
                        }
                    }
                    ids.sort_unstable();
                    FeatureRecord {
                        pos,
                        finest_cell: cell_of(pos, pyr.levels),
                        entries: ids.into_iter().map(|i| Entry { id: LibraryId(i), weight: 1.0 }).collect(),
                    }
                })
                .collect(),
        })
        .collect();
    let bytes = build_index(&lib, &databases).map_err(|e| e.to_string())?.to_bytes();

    let query = ImageRecord::new(
        5_000_000,
        DomainLabel::new(Season::Su, 0),
        (0..N)
            .map(|_| {
                let row = lib.descriptor(LibraryId(rng.random_range(1..=V as u32)));
                let desc = row
                    .iter()
                    .map(|&v| (v + 5.0 * rng.sample::<f32, _>(StandardNormal)).max(0.0))
                    .collect();
                Feature::new(Point::new(rng.random(), rng.random()), desc)
            })
            .collect(),
    );

    let t = Instant::now();
    let described = describe_query(&query, &lib, &miner, &pyr).map_err(|e| e.to_string())?;
    let mining = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let index = InvertedIndex::from_bytes(&bytes, "index").map_err(|e| e.to_string())?;
    let load = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let ranked = xdsd_core::rank(&described, &index).map_err(|e| e.to_string())?;
    let scoring = t.elapsed().as_secs_f64();
    check(ranked.len() == IMAGES as usize, || "incomplete ranking".into())?;
    check(ranked.entries[0].score > 0.0, || "query matched nothing".into())?;
    let summary = format!(
        "mining 300x100k {mining:.3}s (< 2s); index load {load:.3}s + scoring {scoring:.3}s = {:.3}s (< 1s)",
        load + scoring
    );
    check(mining < 2.0 && load + scoring < 1.0, || summary.clone())?;
    Ok(summary)
}

fn determinism() -> Outcome {
    let world = generate_world(&SyntheticWorldConfig {
        num_places: 40,
        num_queries: 30,
        library_places: 40,
        layout_distractors: true,
        seed: 12,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let data = Dataset::from_world(world);
    let cfg = ExperimentConfig {
        kmeans: KMeansConfig {
            words: 200,
            seed: 3,
            ..Default::default()
        },
        ..Default::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for (i, threads) in [1usize, 4, 1].into_iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?
            .install(|| run_experiment(&data, &cfg, Some(&out)))
            .map_err(|e| e.to_string())?;
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .map_err(|e| e.to_string())?
            .map(|e| e.unwrap().path())
            .filter(|p| p.file_name().unwrap() != "timing.json")
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
            .collect();
        files.sort();
        runs.push(files);
    }
    check(runs[0] == runs[1] && runs[1] == runs[2], || "outputs differ between runs".into())?;
    Ok(format!("{} output files byte-identical across 1/4/1 threads", runs[0].len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("k-NN exactness", knn_exactness),
        ("scoring oracle equivalence", scoring_oracle),
        ("pyramid properties", pyramid_properties),
        ("metric correctness", metric_correctness),
        ("directional method ordering", directional_ordering),
        ("cross-domain error profile", error_profile_dominance),
        ("performance budget", performance_budget),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
