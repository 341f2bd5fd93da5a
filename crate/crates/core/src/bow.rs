//! TF-IDF bag-of-words comparator: a k-means vocabulary trained on the
//! library, tf-idf image vectors and cosine ranking.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::library::ExperienceLibrary;
use crate::matcher::{RankedEntry, RankedResult};
use crate::model::ImageRecord;

const VOCAB_MAGIC: &[u8; 4] = b"XDVW";
const VOCAB_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub words: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the relative objective improvement drops below this.
    pub tol: f64,
}

impl KMeansConfig {
    pub const DEFAULT_WORDS: usize = 1000;
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            words: Self::DEFAULT_WORDS,
            seed: 0,
            max_iters: 50,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    dim: usize,
    /// Row-major `W x dim`.
    centroids: Vec<f64>,
    seed: u64,
    training_fingerprint: u64,
    /// k-means objective after each assignment step.
    objective: Vec<f64>,
}

#[inline]
fn sq_dist(point: &[f32], centroid: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&p, &c) in point.iter().zip(centroid) {
        let d = p as f64 - c;
        s += d * d;
    }
    s
}

impl Vocabulary {
    pub fn words(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn training_fingerprint(&self) -> u64 {
        self.training_fingerprint
    }

    pub fn objective_history(&self) -> &[f64] {
        &self.objective
    }

    pub fn centroid(&self, word: usize) -> &[f64] {
        &self.centroids[word * self.dim..(word + 1) * self.dim]
    }

    /// Nearest word and its squared distance; lowest word index on ties.
    pub fn quantize(&self, desc: &[f32]) -> (u32, f64) {
        let mut best = (0u32, f64::INFINITY);
        for (w, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(desc, c);
            if d < best.1 {
                best = (w as u32, d);
            }
        }
        best
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut enc = Encoder::with_capacity(48 + self.centroids.len() * 8 + self.objective.len() * 8);
        enc.bytes(VOCAB_MAGIC);
        enc.u32(VOCAB_VERSION);
        enc.u32(self.words() as u32);
        enc.u32(self.dim as u32);
        enc.u64(self.seed);
        enc.u64(self.training_fingerprint);
        enc.u32(self.objective.len() as u32);
        for &o in &self.objective {
            enc.f64(o);
        }
        for &c in &self.centroids {
            enc.f64(c);
        }
        enc.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = binio::read_file(path)?;
        let mut dec = Decoder::new(&bytes, path.display().to_string());
        dec.magic(VOCAB_MAGIC)?;
        let version = dec.u32()?;
        if version != VOCAB_VERSION {
            return Err(dec.format_error(format!("unsupported vocabulary version {version}")));
        }
        let words = dec.u32()? as usize;
        let dim = dec.u32()? as usize;
        if words == 0 || dim == 0 {
            return Err(dec.format_error("empty vocabulary"));
        }
        let seed = dec.u64()?;
        let training_fingerprint = dec.u64()?;
        let iters = dec.u32()? as usize;
        let objective = (0..iters).map(|_| dec.f64()).collect::<Result<Vec<_>>>()?;
        let centroids = (0..words * dim).map(|_| dec.f64()).collect::<Result<Vec<_>>>()?;
        dec.finish()?;
        Ok(Self {
            dim,
            centroids,
            seed,
            training_fingerprint,
            objective,
        })
    }
}

/// Lloyd's k-means over the library descriptors.
///
/// Initial centroids are `W` distinct library points drawn with a seeded
/// ChaCha8 generator. A cluster that loses all its points is reseeded at the
/// point currently farthest from its centroid.
pub fn train_vocabulary(library: &ExperienceLibrary, cfg: &KMeansConfig) -> Result<Vocabulary> {
    let v = library.len();
    let dim = library.dim();
    let w = cfg.words;
    if w == 0 {
        return Err(Error::InvalidConfig("vocabulary size must be positive".into()));
    }
    if w > v {
        return Err(Error::VocabularyTooLarge { words: w, library: v });
    }
    let points = library.raw();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = rand::seq::index::sample(&mut rng, v, w);
    let mut centroids: Vec<f64> = init
        .iter()
        .flat_map(|i| points[i * dim..(i + 1) * dim].iter().map(|&x| x as f64))
        .collect();

    let mut objective = Vec::new();
    for _ in 0..cfg.max_iters.max(1) {
        let assignment: Vec<(u32, f64)> = points
            .par_chunks_exact(dim)
            .map(|p| {
                let mut best = (0u32, f64::INFINITY);
                for (c, cent) in centroids.chunks_exact(dim).enumerate() {
                    let d = sq_dist(p, cent);
                    if d < best.1 {
                        best = (c as u32, d);
                    }
                }
                best
            })
            .collect();
        let j: f64 = assignment.iter().map(|a| a.1).sum();
        let converged = objective
            .last()
            .is_some_and(|&prev: &f64| prev - j <= cfg.tol * prev.abs());
        objective.push(j);
        if converged || j == 0.0 {
            break;
        }

        let mut sums = vec![0.0f64; w * dim];
        let mut counts = vec![0usize; w];
        for (p, &(c, _)) in points.chunks_exact(dim).zip(&assignment) {
            let c = c as usize;
            counts[c] += 1;
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
                *s += x as f64;
            }
        }
        let mut far: Vec<usize> = Vec::new();
        for c in 0..w {
            let cent = &mut centroids[c * dim..(c + 1) * dim];
            if counts[c] > 0 {
                let n = counts[c] as f64;
                for (x, &s) in cent.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *x = s / n;
                }
                continue;
            }
            if far.is_empty() {
                far = (0..v).collect();
                far.sort_by(|&a, &b| assignment[b].1.total_cmp(&assignment[a].1).then(b.cmp(&a)));
            }
            // Farthest remaining point; popped so two empty clusters never share one.
            let p = far.remove(0);
            for (x, &y) in cent.iter_mut().zip(&points[p * dim..(p + 1) * dim]) {
                *x = y as f64;
            }
        }
    }

    Ok(Vocabulary {
        dim,
        centroids,
        seed: cfg.seed,
        training_fingerprint: library.fingerprint(),
        objective,
    })
}

/// Sparse L2-normalized tf-idf vector, sorted by word.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BowVector {
    pub weights: Vec<(u32, f64)>,
}

impl BowVector {
    pub fn dot(&self, other: &BowVector) -> f64 {
        let (mut i, mut j, mut s) = (0, 0, 0.0);
        while i < self.weights.len() && j < other.weights.len() {
            let (a, b) = (self.weights[i], other.weights[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    s += a.1 * b.1;
                    i += 1;
                    j += 1;
                }
            }
        }
        s
    }

    pub fn norm(&self) -> f64 {
        self.weights.iter().map(|w| w.1 * w.1).sum::<f64>().sqrt()
    }
}

/// Word counts of an image, sorted by word.
pub fn word_counts(image: &ImageRecord, vocab: &Vocabulary) -> Vec<(u32, u32)> {
    let mut words: Vec<u32> = image.features.iter().map(|f| vocab.quantize(&f.desc).0).collect();
    words.sort_unstable();
    let mut counts: Vec<(u32, u32)> = Vec::new();
    for w in words {
        match counts.last_mut() {
            Some(last) if last.0 == w => last.1 += 1,
            _ => counts.push((w, 1)),
        }
    }
    counts
}

/// Database side of the comparator: idf table plus one vector per image.
#[derive(Clone, Debug)]
pub struct BowIndex {
    idf: Vec<f64>,
    images: Vec<(u64, BowVector)>,
}

impl BowIndex {
    /// idf = ln((1 + #images) / (1 + df)) + 1.
    pub fn build(database: &[ImageRecord], vocab: &Vocabulary) -> Result<Self> {
        if let Some((im, f)) = database
            .iter()
            .flat_map(|im| im.features.iter().map(move |f| (im, f)))
            .find(|(_, f)| f.dim() != vocab.dim())
        {
            return Err(Error::DimensionMismatch {
                image_id: im.image_id,
                expected: vocab.dim(),
                found: f.dim(),
            });
        }
        let counts: Vec<Vec<(u32, u32)>> = database.par_iter().map(|im| word_counts(im, vocab)).collect();
        let mut df = vec![0u64; vocab.words()];
        for c in &counts {
            for &(w, _) in c {
                df[w as usize] += 1;
            }
        }
        let n = database.len() as f64;
        let idf: Vec<f64> = df.iter().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
        let images = database
            .iter()
            .zip(&counts)
            .map(|(im, c)| (im.image_id, tfidf(c, &idf)))
            .collect();
        Ok(Self { idf, images })
    }

    pub fn vector(&self, image: &ImageRecord, vocab: &Vocabulary) -> BowVector {
        tfidf(&word_counts(image, vocab), &self.idf)
    }

    pub fn rank(&self, query: &ImageRecord, vocab: &Vocabulary) -> RankedResult {
        let q = self.vector(query, vocab);
        let entries = self
            .images
            .iter()
            .map(|(id, v)| RankedEntry {
                image_id: *id,
                score: q.dot(v),
                levels: Vec::new(),
            })
            .collect();
        RankedResult::from_unsorted(query.image_id, entries)
    }
}

fn tfidf(counts: &[(u32, u32)], idf: &[f64]) -> BowVector {
    let total: u32 = counts.iter().map(|c| c.1).sum();
    if total == 0 {
        return BowVector::default();
    }
    let mut weights: Vec<(u32, f64)> = counts
        .iter()
        .map(|&(w, c)| (w, c as f64 / total as f64 * idf[w as usize]))
        .collect();
    let norm = weights.iter().map(|w| w.1 * w.1).sum::<f64>().sqrt();
    for w in &mut weights {
        w.1 /= norm;
    }
    BowVector { weights }
}

/// Cosine ranking of `database` against `query`; ties by image id.
pub fn bow_rank(query: &ImageRecord, database: &[ImageRecord], vocab: &Vocabulary) -> Result<RankedResult> {
    Ok(BowIndex::build(database, vocab)?.rank(query, vocab))
}
