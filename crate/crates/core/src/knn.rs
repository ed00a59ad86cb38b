//! Nearest-neighbour classification with Euclidean distance or a learned
//! pairwise similarity, plus accuracy bookkeeping.

use std::cmp::Ordering;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledImage, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    /// References kept by the Euclidean prefilter before similarity reranking.
    pub shortlist: usize,
    /// Average the scores of both channel orders.
    pub symmetrize: bool,
    /// At most this many shortlisted references per class.
    pub per_class_cap: Option<usize>,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 15,
            shortlist: 200,
            symmetrize: false,
            per_class_cap: None,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self, references: usize) -> Result<()> {
        if references == 0 {
            return Err(Error::Argument("reference set is empty".into()));
        }
        if self.k == 0 || self.k > self.shortlist || self.shortlist > references {
            return Err(Error::Argument(format!(
                "need 1 <= k ({}) <= shortlist ({}) <= references ({references})",
                self.k, self.shortlist
            )));
        }
        if self.per_class_cap == Some(0) {
            return Err(Error::Argument("per-class cap must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    /// Distance for Euclidean search, similarity for reranked search.
    pub score: f32,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub predicted_label: u8,
    /// Best first.
    pub neighbors: Vec<Neighbor>,
    pub votes: [usize; NUM_CLASSES],
}

/// Squared L2 distance. Accumulates in independent lanes so the loop
/// vectorises; the summation order is fixed, so results are reproducible.
pub fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 16;
    let mut acc = [0.0f32; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..LANES {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = x - y;
        tail += d * d;
    }
    acc.iter().sum::<f32>() + tail
}

fn check_query(query: &[f32], references: &[LabeledImage]) -> Result<()> {
    if references.is_empty() {
        return Err(Error::Argument("reference set is empty".into()));
    }
    if let Some(bad) = references.iter().find(|r| r.pixels.len() != query.len()) {
        return Err(Error::shape("knn", &[query.len()], &[bad.pixels.len()]));
    }
    Ok(())
}

/// Ascending distance, then label, then index.
fn nearer(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then(a.label.cmp(&b.label))
        .then(a.index.cmp(&b.index))
}

/// Descending similarity, then label, then index.
fn more_similar(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.label.cmp(&b.label))
        .then(a.index.cmp(&b.index))
}

/// The `n` best entries under `cmp`, best first.
fn select_best(mut all: Vec<Neighbor>, n: usize, cmp: fn(&Neighbor, &Neighbor) -> Ordering) -> Vec<Neighbor> {
    let n = n.min(all.len());
    if n < all.len() {
        all.select_nth_unstable_by(n, cmp);
        all.truncate(n);
    }
    all.sort_by(cmp);
    all
}

/// Majority vote. Ties go to the class whose neighbours have the better
/// summed score (smaller distance or larger similarity), then to the smaller
/// class index.
fn vote(neighbors: Vec<Neighbor>, larger_is_better: bool) -> Classification {
    let mut votes = [0usize; NUM_CLASSES];
    let mut sums = [0.0f64; NUM_CLASSES];
    for n in &neighbors {
        votes[n.label as usize] += 1;
        sums[n.label as usize] += n.score as f64;
    }
    let top = *votes.iter().max().expect("ten classes");
    let mut best: Option<usize> = None;
    for c in (0..NUM_CLASSES).filter(|&c| votes[c] == top) {
        best = match best {
            None => Some(c),
            Some(b) => {
                let better = if larger_is_better { sums[c] > sums[b] } else { sums[c] < sums[b] };
                Some(if better { c } else { b })
            }
        };
    }
    Classification {
        predicted_label: best.expect("at least one neighbour") as u8,
        neighbors,
        votes,
    }
}

/// Neighbours scored by squared distance; ranking on the square avoids
/// ties introduced by rounding the root.
fn euclidean_neighbors(query: &[f32], references: &[LabeledImage]) -> Vec<Neighbor> {
    references
        .iter()
        .enumerate()
        .map(|(index, r)| Neighbor {
            index,
            score: squared_distance(query, &r.pixels),
            label: r.label,
        })
        .collect()
}

/// Plain k-NN with pixel-space L2 distance.
pub fn knn_euclidean(query: &[f32], references: &[LabeledImage], k: usize) -> Result<Classification> {
    check_query(query, references)?;
    if k == 0 || k > references.len() {
        return Err(Error::Argument(format!(
            "k = {k} must be in 1..={}",
            references.len()
        )));
    }
    let mut best = select_best(euclidean_neighbors(query, references), k, nearer);
    for n in &mut best {
        n.score = n.score.sqrt();
    }
    Ok(vote(best, false))
}

/// Anything that can score a query against a batch of references.
pub trait PairScorer {
    fn score(&self, query: &[f32], references: &[&[f32]], symmetrize: bool) -> Result<Vec<f32>>;
}

impl PairScorer for Model {
    fn score(&self, query: &[f32], references: &[&[f32]], symmetrize: bool) -> Result<Vec<f32>> {
        if symmetrize {
            self.score_pairs_symmetric(query, references)
        } else {
            self.score_pairs(query, references)
        }
    }
}

/// Euclidean candidates for reranking. When the shortlist spans the whole
/// reference set (and no cap applies) distances are never computed.
fn shortlist(query: &[f32], references: &[LabeledImage], config: &KnnConfig) -> Vec<usize> {
    if config.shortlist >= references.len() && config.per_class_cap.is_none() {
        return (0..references.len()).collect();
    }
    let mut all = euclidean_neighbors(query, references);
    match config.per_class_cap {
        None => select_best(all, config.shortlist, nearer)
            .into_iter()
            .map(|n| n.index)
            .collect(),
        Some(cap) => {
            all.sort_by(nearer);
            let mut taken = [0usize; NUM_CLASSES];
            let mut out = Vec::with_capacity(config.shortlist);
            for n in all {
                if out.len() == config.shortlist {
                    break;
                }
                if taken[n.label as usize] < cap {
                    taken[n.label as usize] += 1;
                    out.push(n.index);
                }
            }
            out
        }
    }
}

/// Two-stage k-NN: Euclidean shortlist, then rerank by learned similarity.
pub fn knn_cevit(
    query: &[f32],
    references: &[LabeledImage],
    scorer: &impl PairScorer,
    config: &KnnConfig,
) -> Result<Classification> {
    check_query(query, references)?;
    config.validate(references.len())?;
    let candidates = shortlist(query, references, config);
    let images: Vec<&[f32]> = candidates.iter().map(|&i| references[i].pixels.as_slice()).collect();
    let scores = scorer.score(query, &images, config.symmetrize)?;
    if scores.len() != candidates.len() {
        return Err(Error::Consistency(format!(
            "scorer returned {} scores for {} references",
            scores.len(),
            candidates.len()
        )));
    }
    let scored = candidates
        .iter()
        .zip(scores)
        .map(|(&index, score)| Neighbor {
            index,
            score,
            label: references[index].label,
        })
        .collect();
    let k = config.k.min(candidates.len());
    Ok(vote(select_best(scored, k, more_similar), true))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub method: String,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub elapsed_s: f64,
}

impl AccuracyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per class (count, correct, accuracy, confusion counts) and a
    /// final `all` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,count,correct,accuracy");
        for p in 0..NUM_CLASSES {
            out.push_str(&format!(",pred_{p}"));
        }
        out.push('\n');
        for c in &self.per_class {
            out.push_str(&format!("{},{},{},{:.6}", c.class, c.count, c.correct, c.accuracy));
            for p in 0..NUM_CLASSES {
                out.push_str(&format!(",{}", self.confusion[c.class][p]));
            }
            out.push('\n');
        }
        out.push_str(&format!("all,{},{},{:.6}", self.total, self.correct, self.accuracy));
        for p in 0..NUM_CLASSES {
            let col: usize = (0..NUM_CLASSES).map(|t| self.confusion[t][p]).sum();
            out.push_str(&format!(",{col}"));
        }
        out.push('\n');
        out
    }
}

/// Runs `classify` (given the query's position and image) on every query and tallies the results. `progress` is
/// called after each query with the number done so far.
pub fn evaluate_accuracy(
    method: &str,
    queries: &[LabeledImage],
    mut classify: impl FnMut(usize, &LabeledImage) -> Result<u8>,
    mut progress: impl FnMut(usize),
) -> Result<AccuracyReport> {
    if queries.is_empty() {
        return Err(Error::Argument("query set is empty".into()));
    }
    let start = Instant::now();
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (i, q) in queries.iter().enumerate() {
        let p = classify(i, q)? as usize;
        if p >= NUM_CLASSES {
            return Err(Error::Consistency(format!("predicted class {p} out of range")));
        }
        confusion[q.label as usize][p] += 1;
        progress(i + 1);
    }
    let per_class: Vec<ClassAccuracy> = (0..NUM_CLASSES)
        .map(|c| {
            let count: usize = confusion[c].iter().sum();
            let correct = confusion[c][c];
            ClassAccuracy {
                class: c,
                count,
                correct,
                accuracy: if count == 0 { 0.0 } else { correct as f64 / count as f64 },
            }
        })
        .collect();
    let correct: usize = per_class.iter().map(|c| c.correct).sum();
    Ok(AccuracyReport {
        method: method.to_string(),
        total: queries.len(),
        correct,
        accuracy: correct as f64 / queries.len() as f64,
        per_class,
        confusion,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// Euclidean k-NN over `references` for every query.
pub fn eval_knn(
    queries: &[LabeledImage],
    references: &[LabeledImage],
    k: usize,
    progress: impl FnMut(usize),
) -> Result<AccuracyReport> {
    evaluate_accuracy(
        "knn",
        queries,
        |_, q| Ok(knn_euclidean(&q.pixels, references, k)?.predicted_label),
        progress,
    )
}

/// Arg-max of the classifier's logits for every query.
pub fn eval_classifier(queries: &[LabeledImage], model: &Model, progress: impl FnMut(usize)) -> Result<AccuracyReport> {
    // Batched inference, a chunk at a time so progress and timing cover it.
    const CHUNK: usize = 500;
    let mut logits = Vec::new();
    evaluate_accuracy(
        "vit",
        queries,
        |i, _| {
            if i % CHUNK == 0 {
                logits = model.classify_batch(&queries[i..(i + CHUNK).min(queries.len())])?;
            }
            Ok(crate::train::argmax(&logits[i % CHUNK]) as u8)
        },
        progress,
    )
}

/// Shortlist-and-rerank k-NN for every query.
pub fn eval_knn_cevit(
    queries: &[LabeledImage],
    references: &[LabeledImage],
    scorer: &impl PairScorer,
    config: &KnnConfig,
    progress: impl FnMut(usize),
) -> Result<AccuracyReport> {
    config.validate(references.len())?;
    evaluate_accuracy(
        "cevit-knn",
        queries,
        |_, q| Ok(knn_cevit(&q.pixels, references, scorer, config)?.predicted_label),
        progress,
    )
}
