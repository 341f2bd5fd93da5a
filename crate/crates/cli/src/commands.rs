use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;
use xdsd_core::bow::{train_vocabulary, BowIndex, KMeansConfig};
use xdsd_core::descriptor::describe_all;
use xdsd_core::eval::experiment::{run_experiment, Dataset, ExperimentConfig};
use xdsd_core::eval::metrics::{self, RelevanceSpec};
use xdsd_core::eval::world::{generate_world, write_world, DomainTransform, SyntheticWorldConfig};
use xdsd_core::io::{load_manifest, Collection, LoadedManifest};
use xdsd_core::knn::error_profile_for_images;
use xdsd_core::matcher::{explanation_histogram, top_subimage_pairs};
use xdsd_core::{
    build_index, rank, DomainLabel, Error, ExperienceLibrary, ImageRecord, InvertedIndex, PyramidConfig,
    RankedResult, Result, Role, Season, VocabFilter,
};

use crate::{
    AnalyzeArgs, BaselineArgs, BowArgs, BuildLibraryArgs, Command, EvaluateArgs, GenWorldArgs, IndexArgs, QueryArgs,
    SubimageArgs, VocabArgs,
};

const LIBRARY_FILE: &str = "library.xdlb";
const INDEX_FILE: &str = "index.xdix";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildLibrary(a) => build_library(a),
        Command::Index(a) => index(a),
        Command::Query(a) => query(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Baseline(a) => baseline(a),
        Command::GenWorld(a) => gen_world(a),
        Command::AnalyzeErrors(a) => analyze_errors(a),
        Command::AnalyzeUsage(a) => analyze_usage(a),
        Command::ReportSubimages(a) => report_subimages(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value).expect("json value serializes") + "\n"))
}

/// Library filter from flags, falling back to the domains of the manifest's
/// query and database images.
fn vocab_filter(args: &VocabArgs, manifest: &LoadedManifest) -> Result<VocabFilter> {
    let used = manifest
        .manifest
        .entries(Collection::Query)
        .into_iter()
        .chain(manifest.manifest.entries(Collection::Database));
    let mut seasons = args.query_season.clone();
    let mut routes = args.query_route.clone();
    if seasons.is_empty() {
        seasons = used.clone().map(|e| e.season.parse()).collect::<Result<Vec<Season>>>()?;
    }
    if routes.is_empty() {
        routes = used.map(|e| e.route).collect();
    }
    seasons.sort_unstable();
    seasons.dedup();
    routes.sort_unstable();
    routes.dedup();
    Ok(VocabFilter::new(args.vocab, seasons, routes))
}

fn library_for(manifest: &LoadedManifest, library: Option<&Path>, vocab: &VocabArgs) -> Result<ExperienceLibrary> {
    match library {
        Some(p) => ExperienceLibrary::load(p),
        None => vocab_filter(vocab, manifest)?.build(&manifest.load_collection(Collection::Library)?),
    }
}

fn index_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(INDEX_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_index_and_library(index: &Path, library: Option<&Path>) -> Result<(InvertedIndex, ExperienceLibrary)> {
    let index = index_path(index);
    let library = match library {
        Some(p) => p.to_path_buf(),
        None => index.parent().unwrap_or(Path::new(".")).join(LIBRARY_FILE),
    };
    let lib = ExperienceLibrary::load(&library)?;
    let idx = InvertedIndex::load_for(&index, &lib)?;
    Ok((idx, lib))
}

fn query_pyramid(levels: u8, index: &InvertedIndex) -> Result<PyramidConfig> {
    if levels > index.pyramid().levels {
        return Err(Error::ConfigMismatch(format!(
            "--levels {levels} exceeds the index pyramid depth {}",
            index.pyramid().levels
        )));
    }
    PyramidConfig::new(levels)
}

fn rankings_tsv(rankings: &[RankedResult]) -> String {
    let mut s = String::from("query_id\trank\timage_id\tscore\n");
    for r in rankings {
        for (i, e) in r.entries.iter().enumerate() {
            let _ = writeln!(s, "{}\t{}\t{}\t{:.17e}", r.query_id, i + 1, e.image_id, e.score);
        }
    }
    s
}

fn domain_json(d: &DomainLabel) -> serde_json::Value {
    json!({ "season": d.season.token(), "route": d.route })
}

fn build_library(a: BuildLibraryArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let filter = vocab_filter(&a.vocab, &manifest)?;
    let lib = filter.build(&manifest.load_collection(Collection::Library)?)?;
    create_dir(&a.output_dir)?;
    let path = a.output_dir.join(LIBRARY_FILE);
    lib.save(&path)?;
    println!(
        "library\tfeatures={}\tdim={}\tfingerprint={:016x}\t{}",
        lib.len(),
        lib.dim(),
        lib.fingerprint(),
        path.display()
    );
    Ok(())
}

fn index(a: IndexArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let lib_path = a.library.clone().unwrap_or_else(|| a.output_dir.join(LIBRARY_FILE));
    let lib = ExperienceLibrary::load(&lib_path)?;
    let pyr = PyramidConfig::new(a.levels)?;
    let database = manifest.load_collection(Collection::Database)?;
    let described = describe_all(&database, &lib, &a.miner.config(), &pyr, Role::Database)?;
    let idx = build_index(&lib, &described)?;
    create_dir(&a.output_dir)?;
    let path = a.output_dir.join(INDEX_FILE);
    idx.save(&path)?;
    println!(
        "index\timages={}\tpostings={}\tlevels={}\t{}",
        idx.num_images(),
        idx.total_postings(),
        a.levels,
        path.display()
    );
    Ok(())
}

fn query(a: QueryArgs) -> Result<()> {
    let (idx, lib) = load_index_and_library(&a.index, a.library.as_deref())?;
    let pyr = query_pyramid(a.levels, &idx)?;
    let manifest = load_manifest(&a.query_manifest)?;
    let queries = manifest.load_collection(Collection::Query)?;
    let described = describe_all(&queries, &lib, &a.miner.config(), &pyr, Role::Query)?;
    let rankings = described
        .par_iter()
        .map(|q| rank(q, &idx))
        .collect::<Result<Vec<_>>>()?;
    let tsv = rankings_tsv(&rankings);
    let Some(out) = &a.output_dir else {
        print!("{tsv}");
        return Ok(());
    };
    create_dir(out)?;
    write(&out.join("rankings.tsv"), &tsv)?;
    let mut per_query = Vec::new();
    for (q, r) in described.iter().zip(&rankings) {
        let top: Vec<_> = r
            .entries
            .iter()
            .take(a.top)
            .map(|e| json!({ "image_id": e.image_id, "score": e.score, "levels": e.levels }))
            .collect();
        let subimages = match r.entries.first() {
            Some(best) if a.subimages > 0 => top_subimage_pairs(q, best.image_id, &idx, a.subimages)?
                .into_iter()
                .map(|p| {
                    json!({
                        "level": p.level,
                        "cell": p.cell,
                        "bounds": p.bounds,
                        "similarity": p.similarity,
                        "contribution": p.contribution,
                    })
                })
                .collect(),
            _ => Vec::new(),
        };
        per_query.push(json!({
            "query_id": q.image_id,
            "domain": domain_json(&q.domain),
            "features": q.len(),
            "top": top,
            "subimages": subimages,
        }));
    }
    write_json(
        &out.join("query_report.json"),
        &json!({
            "levels": a.levels,
            "k": a.miner.k,
            "d0": a.miner.d0,
            "library_fingerprint": format!("{:016x}", lib.fingerprint()),
            "queries": per_query,
        }),
    )?;
    println!("query\tqueries={}\t{}", rankings.len(), out.join("rankings.tsv").display());
    Ok(())
}

fn kmeans(b: &BowArgs) -> KMeansConfig {
    KMeansConfig {
        words: b.words,
        seed: b.seed,
        max_iters: b.max_iters,
        ..Default::default()
    }
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let filter = vocab_filter(&a.vocab, &manifest)?;
    let dataset = Dataset::from_manifest(&manifest)?;
    let cfg = ExperimentConfig {
        methods: a.methods.clone(),
        miner: a.miner.config(),
        pyramid: PyramidConfig::new(a.levels)?,
        vocab: filter.kind,
        exclude_seasons: Some(filter.seasons),
        exclude_routes: Some(filter.routes),
        kmeans: kmeans(&a.bow),
        top_subimages: a.subimages,
    };
    let outcome = run_experiment(&dataset, &cfg, Some(&a.output_dir))?;
    for m in &outcome.report.methods {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        println!("{}\tanr={}\tmap={}\tqueries={}", m.method, fmt(m.anr), fmt(m.map), m.queries.len());
    }
    Ok(())
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let lib = vocab_filter(&a.vocab, &manifest)?.build(&manifest.load_collection(Collection::Library)?)?;
    let vocab = train_vocabulary(&lib, &kmeans(&a.bow))?;
    let database = manifest.load_collection(Collection::Database)?;
    let queries = manifest.load_collection(Collection::Query)?;
    let bow = BowIndex::build(&database, &vocab)?;
    let rankings: Vec<RankedResult> = queries.par_iter().map(|q| bow.rank(q, &vocab)).collect();
    create_dir(&a.output_dir)?;
    vocab.save(&a.output_dir.join("vocabulary.xdvw"))?;
    write(&a.output_dir.join("rankings.tsv"), &rankings_tsv(&rankings))?;
    let relevance = RelevanceSpec::from_manifest(&manifest.manifest);
    let judged = queries.iter().all(|q| relevance.relevant(q.image_id).is_some());
    let (anr, map) = if judged {
        (
            metrics::anr(&rankings, &relevance, database.len())?,
            metrics::mean_average_precision(&rankings, &relevance)?,
        )
    } else {
        (None, None)
    };
    write_json(
        &a.output_dir.join("baseline.json"),
        &json!({
            "words": vocab.words(),
            "seed": vocab.seed(),
            "iterations": vocab.objective_history().len(),
            "objective": vocab.objective_history(),
            "library_fingerprint": format!("{:016x}", lib.fingerprint()),
            "queries": rankings.len(),
            "anr": anr,
            "map": map,
        }),
    )?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
    println!("tfidf\tanr={}\tmap={}\tqueries={}", fmt(anr), fmt(map), rankings.len());
    Ok(())
}

fn gen_world(a: GenWorldArgs) -> Result<()> {
    let transform = DomainTransform {
        noise_sigma: a.sigma,
        gain_spread: a.gain_spread,
        dropout: a.dropout,
        replacement: a.replacement,
        jitter: a.jitter,
    };
    let defaults = SyntheticWorldConfig::default();
    let mut cfg = SyntheticWorldConfig {
        num_places: a.places,
        num_queries: a.queries,
        features_per_image: a.features,
        dim: a.dim,
        routes: a.routes,
        library_places: a.library_places,
        query_domain: DomainLabel::new(a.query_season, 0),
        database_domain: DomainLabel::new(a.database_season, 0),
        transform,
        layout_distractors: a.layout_distractors,
        seed: a.seed,
        ..defaults
    };
    if a.noiseless {
        cfg = cfg.noiseless();
    }
    let world = generate_world(&cfg)?;
    create_dir(&a.output_dir)?;
    let manifest = write_world(&world, &a.output_dir)?;
    write(
        &a.output_dir.join("world.json"),
        &(serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n"),
    )?;
    println!(
        "world\tlibrary={}\tdatabase={}\tdistractors={}\tqueries={}\t{}",
        manifest.library.len(),
        manifest.database.len(),
        manifest.distractor.len(),
        manifest.query.len(),
        a.output_dir.join("manifest.toml").display()
    );
    Ok(())
}

fn analysis_inputs(a: &AnalyzeArgs) -> Result<(ExperienceLibrary, Vec<ImageRecord>)> {
    let manifest = load_manifest(&a.manifest)?;
    let lib = library_for(&manifest, a.library.as_deref(), &a.vocab)?;
    let queries = manifest.load_collection(Collection::Query)?;
    Ok((lib, queries))
}

fn analyze_errors(a: AnalyzeArgs) -> Result<()> {
    let (lib, queries) = analysis_inputs(&a)?;
    let profile = error_profile_for_images(&queries, &lib, a.miner.exclude_same_source)?;
    create_dir(&a.output_dir)?;
    write(&a.output_dir.join("error_profile.tsv"), &profile.to_tsv())?;
    write_json(
        &a.output_dir.join("error_summary.json"),
        &json!({
            "features": profile.len(),
            "mean": profile.mean(),
            "deciles": profile.deciles(),
            "library_fingerprint": format!("{:016x}", lib.fingerprint()),
        }),
    )?;
    let median = profile.percentile(50.0).map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
    println!("errors\tfeatures={}\tmedian={median}", profile.len());
    Ok(())
}

fn analyze_usage(a: AnalyzeArgs) -> Result<()> {
    let (lib, queries) = analysis_inputs(&a)?;
    let described = describe_all(&queries, &lib, &a.miner.config(), &PyramidConfig::default(), Role::Query)?;
    let hist = explanation_histogram(&described, &lib);
    create_dir(&a.output_dir)?;
    write(&a.output_dir.join("usage.csv"), &hist.to_csv())?;
    println!("usage\tentries={}", hist.total());
    Ok(())
}

fn report_subimages(a: SubimageArgs) -> Result<()> {
    let (idx, lib) = load_index_and_library(&a.index, a.library.as_deref())?;
    let pyr = query_pyramid(a.levels, &idx)?;
    let manifest = load_manifest(&a.query_manifest)?;
    let queries = manifest.load_collection(Collection::Query)?;
    let image = queries
        .into_iter()
        .find(|q| q.image_id == a.query_id)
        .ok_or(Error::UnknownImage(a.query_id))?;
    let described = describe_all(std::slice::from_ref(&image), &lib, &a.miner.config(), &pyr, Role::Query)?
        .pop()
        .expect("one query described");
    let target = match a.image_id {
        Some(id) => id,
        None => rank(&described, &idx)?
            .entries
            .first()
            .map(|e| e.image_id)
            .ok_or_else(|| Error::InvalidConfig("index holds no images".into()))?,
    };
    let pairs = top_subimage_pairs(&described, target, &idx, a.top)?;
    let mut s = String::from("query_id,image_id,position,level,cell,x0,y0,x1,y1,similarity,contribution\n");
    for (i, p) in pairs.iter().enumerate() {
        let [x0, y0, x1, y1] = p.bounds;
        let _ = writeln!(
            s,
            "{},{target},{},{},{},{x0},{y0},{x1},{y1},{},{}",
            a.query_id,
            i + 1,
            p.level,
            p.cell,
            p.similarity,
            p.contribution
        );
    }
    match &a.output_dir {
        Some(out) => {
            create_dir(out)?;
            let path = out.join(format!("subimages_{}.csv", a.query_id));
            write(&path, &s)?;
            println!("subimages\tpairs={}\t{}", pairs.len(), path.display());
        }
        None => print!("{s}"),
    }
    Ok(())
}
