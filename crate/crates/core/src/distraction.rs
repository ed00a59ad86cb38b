//! Distraction benchmark for attention masks.
//!
//! A mask decides, patch by patch, how much of a distractor image is blended
//! into a query image. The classifier's probability for the distractor class
//! on the blended image, relative to blending with a uniform mask of the same
//! mean, measures how well the mask singles out the class-discriminative
//! regions of the query.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cls_attention, AttentionTrace, PatchMask, Selector};
use crate::data::{class_index_table, LabeledImage, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{HeadKind, Model, PatchGrid};
use crate::tensor::Tensor;

pub const DEFAULT_MU: f32 = 0.25;
pub const DEFAULT_SAMPLES_PER_PAIR: usize = 50;

/// A mask rescaled to a target mean and clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedMask {
    pub mask: PatchMask,
    /// Mean after scaling, before clamping.
    pub scaled_mean: f32,
    /// Mean actually in effect.
    pub clamped_mean: f32,
}

/// Scales `mask` by `mu / mean(mask)`, then clamps every value to `[0, 1]`.
pub fn normalize_mask(mask: &PatchMask, mu: f32) -> Result<NormalizedMask> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::Argument(format!("mu must lie in (0, 1), got {mu}")));
    }
    let mean = mask.values.iter().map(|&v| v as f64).sum::<f64>() / mask.values.len().max(1) as f64;
    if mask.values.is_empty() || !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot normalise a mask with mean {mean}"
        )));
    }
    let scale = mu as f64 / mean;
    let scaled: Vec<f64> = mask.values.iter().map(|&v| v as f64 * scale).collect();
    let scaled_mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    let values: Vec<f32> = scaled.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    let clamped_mean = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
    Ok(NormalizedMask {
        mask: PatchMask {
            grid_n: mask.grid_n,
            values,
        },
        scaled_mean: scaled_mean as f32,
        clamped_mean: clamped_mean as f32,
    })
}

/// Per-patch convex blend `(1 − mᵢ)·qᵢ + mᵢ·dᵢ` of two patch sets laid out as
/// `[num_patches, patch_len]`.
pub fn merge_patches(query: &[f32], distractor: &[f32], mask: &PatchMask) -> Result<Vec<f32>> {
    let m = mask.values.len();
    if query.len() != distractor.len() || m == 0 || query.len() % m != 0 {
        return Err(Error::shape("merge_patches", &[query.len(), m], &[distractor.len()]));
    }
    if mask.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Argument("merge mask values must lie in [0, 1]".into()));
    }
    let per = query.len() / m;
    let mut out = Vec::with_capacity(query.len());
    for ((q, d), &w) in query.chunks_exact(per).zip(distractor.chunks_exact(per)).zip(&mask.values) {
        for (&a, &b) in q.iter().zip(d) {
            let v = (1.0 - w) * a + w * b;
            // Keep rounding from stepping outside the segment.
            out.push(v.clamp(a.min(b), a.max(b)));
        }
    }
    Ok(out)
}

/// Softmax computed in `f64`.
pub fn softmax_probs(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| (z as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / total) as f32).collect()
}

/// Class probabilities of the classifier for a batch of hybrid patch sets,
/// each `[num_patches, patch_len]`.
pub fn hybrid_likelihoods(hybrids: &[Vec<f32>], vit: &Model) -> Result<Vec<Vec<f32>>> {
    if vit.config.head != HeadKind::Classifier10 {
        return Err(Error::Config("distraction likelihoods need a classifier checkpoint".into()));
    }
    let m = vit.config.num_patches();
    let pd = vit.config.patch_dim();
    let mut data = Vec::with_capacity(hybrids.len() * m * pd);
    for h in hybrids {
        if h.len() != m * pd {
            return Err(Error::shape("hybrid_likelihoods", &[h.len()], &[m, pd]));
        }
        data.extend_from_slice(h);
    }
    let patches = Tensor::new(vec![hybrids.len(), m, pd], data)?;
    Ok(vit
        .infer_patches(&patches, false)?
        .outputs
        .iter()
        .map(|l| softmax_probs(l))
        .collect())
}

/// Distraction scores `S = P_mask(d) − P_uniform(d)` from three
/// probability vectors.
pub fn scores_from_probs(p_v: &[f32], p_c: &[f32], p_u: &[f32], distractor_class: usize) -> (f32, f32) {
    let u = p_u[distractor_class];
    (p_v[distractor_class] - u, p_c[distractor_class] - u)
}

/// Everything measured for one (query, distractor, selector) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub query_index: usize,
    pub distractor_index: usize,
    pub query_class: u8,
    pub distractor_class: u8,
    pub selector: Selector,
    pub p_v: f32,
    pub p_c: f32,
    pub p_u: f32,
    pub s_v: f32,
    pub s_c: f32,
    pub mean_v: f32,
    pub mean_c: f32,
    pub mean_u: f32,
}

/// Masks and likelihoods for one image pair under one selector.
#[derive(Clone, Debug, PartialEq)]
pub struct DistractionDetail {
    pub selector: Selector,
    pub m_v: NormalizedMask,
    pub m_c: NormalizedMask,
    pub m_u: NormalizedMask,
    pub probs_v: Vec<f32>,
    pub probs_c: Vec<f32>,
    pub probs_u: Vec<f32>,
    pub s_v: f32,
    pub s_c: f32,
}

/// Raw CLS attention of both models for a (query, distractor) pair.
pub struct PairTraces {
    pub vit: AttentionTrace,
    pub cevit: AttentionTrace,
}

pub fn pair_traces(query: &[f32], distractor: &[f32], vit: &Model, cevit: &Model) -> Result<PairTraces> {
    let (_, vit_trace) = vit.vit_forward(query)?;
    let (_, cevit_trace) = cevit.cevit_score(query, distractor)?;
    Ok(PairTraces {
        vit: vit_trace,
        cevit: cevit_trace,
    })
}

/// Scores the masks given explicitly (`m_v`, `m_c`) against the uniform mask.
pub fn distraction_from_masks(
    query: &[f32],
    distractor: &[f32],
    distractor_class: usize,
    m_v: &PatchMask,
    m_c: &PatchMask,
    vit: &Model,
    mu: f32,
) -> Result<(NormalizedMask, NormalizedMask, NormalizedMask, [Vec<f32>; 3], (f32, f32))> {
    if distractor_class >= NUM_CLASSES {
        return Err(Error::Argument(format!("class {distractor_class} out of range")));
    }
    let grid = PatchGrid::new(vit.config.image_side, 1, vit.config.grid_n)?;
    let qp = grid.patchify(query)?;
    let dp = grid.patchify(distractor)?;
    let n = grid.num_patches();
    let m_u = PatchMask::uniform(vit.config.grid_n, 1.0 / n as f32);
    let nv = normalize_mask(m_v, mu)?;
    let nc = normalize_mask(m_c, mu)?;
    let nu = normalize_mask(&m_u, mu)?;
    let hybrids = vec![
        merge_patches(&qp, &dp, &nv.mask)?,
        merge_patches(&qp, &dp, &nc.mask)?,
        merge_patches(&qp, &dp, &nu.mask)?,
    ];
    let mut probs = hybrid_likelihoods(&hybrids, vit)?;
    let pu = probs.pop().expect("three");
    let pc = probs.pop().expect("three");
    let pv = probs.pop().expect("three");
    let s = scores_from_probs(&pv, &pc, &pu, distractor_class);
    Ok((nv, nc, nu, [pv, pc, pu], s))
}

/// Both distraction scores for one pair of images and one layer selector.
pub fn distraction_scores(
    query: &[f32],
    distractor: &[f32],
    distractor_class: usize,
    vit: &Model,
    cevit: &Model,
    selector: Selector,
    mu: f32,
) -> Result<DistractionDetail> {
    let traces = pair_traces(query, distractor, vit, cevit)?;
    detail_for(query, distractor, distractor_class, &traces, vit, selector, mu)
}

fn detail_for(
    query: &[f32],
    distractor: &[f32],
    distractor_class: usize,
    traces: &PairTraces,
    vit: &Model,
    selector: Selector,
    mu: f32,
) -> Result<DistractionDetail> {
    let m_v = cls_attention(&traces.vit, selector);
    let m_c = cls_attention(&traces.cevit, selector);
    let (m_v, m_c, m_u, [probs_v, probs_c, probs_u], (s_v, s_c)) =
        distraction_from_masks(query, distractor, distractor_class, &m_v, &m_c, vit, mu)?;
    Ok(DistractionDetail {
        selector,
        m_v,
        m_c,
        m_u,
        probs_v,
        probs_c,
        probs_u,
        s_v,
        s_c,
    })
}

/// Ordered `(query class, distractor class)` pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairList(Vec<(u8, u8)>);

impl PairList {
    pub fn new(pairs: Vec<(u8, u8)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Argument("pair list is empty".into()));
        }
        for &(q, d) in &pairs {
            if q as usize >= NUM_CLASSES || d as usize >= NUM_CLASSES {
                return Err(Error::Argument(format!("pair ({q},{d}) has a class out of range")));
            }
            if q == d {
                return Err(Error::Argument(format!("pair ({q},{d}) repeats the same class")));
            }
        }
        Ok(Self(pairs))
    }

    pub fn pairs(&self) -> &[(u8, u8)] {
        &self.0
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }
}

impl Default for PairList {
    /// Queries 0–9 against distractors 6, 7, 3, 5, 1, 8, 0, 2, 9, 4.
    fn default() -> Self {
        let distractors = [6, 7, 3, 5, 1, 8, 0, 2, 9, 4];
        Self((0..10).zip(distractors).collect())
    }
}

impl FromStr for PairList {
    type Err = Error;

    /// One `q,d` pair per line; blank lines and `#` comments are skipped.
    fn from_str(s: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in s.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parsed = line
                .split_once(',')
                .and_then(|(q, d)| Some((q.trim().parse::<u8>().ok()?, d.trim().parse::<u8>().ok()?)));
            match parsed {
                Some(p) => pairs.push(p),
                None => {
                    return Err(Error::Argument(format!(
                        "pair list line {}: expected `q,d`, got `{line}`",
                        n + 1
                    )))
                }
            }
        }
        Self::new(pairs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub pairs: PairList,
    pub samples_per_pair: usize,
    pub selectors: Vec<Selector>,
    pub mu: f32,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            pairs: PairList::default(),
            samples_per_pair: DEFAULT_SAMPLES_PER_PAIR,
            selectors: Selector::ALL.to_vec(),
            mu: DEFAULT_MU,
            seed: 0,
        }
    }
}

/// Means over the samples of one class pair (or of all pairs, when
/// `query_class` and `distractor_class` are `None`) for one selector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub query_class: Option<u8>,
    pub distractor_class: Option<u8>,
    pub selector: Selector,
    pub count: usize,
    pub mean_s_v: f64,
    pub mean_s_c: f64,
    pub mean_p_v: f64,
    pub mean_p_c: f64,
    pub mean_p_u: f64,
}

impl ReportRow {
    fn from_samples<'a>(
        query_class: Option<u8>,
        distractor_class: Option<u8>,
        selector: Selector,
        samples: impl Iterator<Item = &'a SampleRecord>,
    ) -> Self {
        let mut count = 0;
        let mut acc = [0.0f64; 5];
        for s in samples {
            count += 1;
            for (a, v) in acc.iter_mut().zip([s.s_v, s.s_c, s.p_v, s.p_c, s.p_u]) {
                *a += v as f64;
            }
        }
        let n = count.max(1) as f64;
        Self {
            query_class,
            distractor_class,
            selector,
            count,
            mean_s_v: acc[0] / n,
            mean_s_c: acc[1] / n,
            mean_p_v: acc[2] / n,
            mean_p_c: acc[3] / n,
            mean_p_u: acc[4] / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistractionReport {
    pub config: BenchmarkConfig,
    /// One row per class pair and selector.
    pub rows: Vec<ReportRow>,
    /// One row per selector over every sample.
    pub aggregate: Vec<ReportRow>,
    pub samples: Vec<SampleRecord>,
}

impl DistractionReport {
    /// Rebuilds the summary rows from the stored samples.
    pub fn summarize(config: BenchmarkConfig, samples: Vec<SampleRecord>) -> Self {
        let mut rows = Vec::new();
        for &(q, d) in config.pairs.pairs() {
            for &sel in &config.selectors {
                rows.push(ReportRow::from_samples(
                    Some(q),
                    Some(d),
                    sel,
                    samples
                        .iter()
                        .filter(|s| s.query_class == q && s.distractor_class == d && s.selector == sel),
                ));
            }
        }
        let aggregate = config
            .selectors
            .iter()
            .map(|&sel| ReportRow::from_samples(None, None, sel, samples.iter().filter(|s| s.selector == sel)))
            .collect();
        Self {
            config,
            rows,
            aggregate,
            samples,
        }
    }

    pub fn aggregate_for(&self, selector: Selector) -> Option<&ReportRow> {
        self.aggregate.iter().find(|r| r.selector == selector)
    }

    /// Summary rows (pairs, then the aggregate with `all` in the class
    /// columns) as CSV.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("query_class,distractor_class,selector,count,mean_s_v,mean_s_c,mean_p_v,mean_p_c,mean_p_u\n");
        let class = |c: Option<u8>| c.map_or_else(|| "all".to_string(), |c| c.to_string());
        for r in self.rows.iter().chain(&self.aggregate) {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                class(r.query_class),
                class(r.distractor_class),
                r.selector,
                r.count,
                r.mean_s_v,
                r.mean_s_c,
                r.mean_p_v,
                r.mean_p_c,
                r.mean_p_u
            );
        }
        out
    }

    /// JSON; per-sample intermediates only when `verbose`.
    pub fn to_json(&self, verbose: bool) -> Result<String> {
        if verbose {
            return Ok(serde_json::to_string_pretty(self)?);
        }
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("samples");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }

    /// Aggregate scores in the order ViT (first, last, avg), CEViT (first,
    /// last, avg), as a two-line table.
    pub fn table(&self) -> String {
        let order = [Selector::First, Selector::Last, Selector::Average];
        let label = |s: Selector| match s {
            Selector::First => "first layer",
            Selector::Last => "last layer",
            Selector::Average => "Avg.",
        };
        let mut head = Vec::new();
        let mut vals = Vec::new();
        for (name, pick) in [("ViT", 0), ("CEViT", 1)] {
            for sel in order {
                if let Some(r) = self.aggregate_for(sel) {
                    head.push(format!("{name}({})", label(sel)));
                    vals.push(format!("{:.4}", if pick == 0 { r.mean_s_v } else { r.mean_s_c }));
                }
            }
        }
        let widths: Vec<usize> = head.iter().map(|h| h.len().max(8)).collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        format!("{}\n{}\n", line(&head), line(&vals))
    }
}

/// Draws `samples_per_pair` (query, distractor) image pairs per class pair
/// from `test` and scores them under every selector.
pub fn run_benchmark(
    test: &[LabeledImage],
    vit: &Model,
    cevit: &Model,
    config: &BenchmarkConfig,
    mut progress: impl FnMut(usize, usize),
) -> Result<DistractionReport> {
    if config.samples_per_pair == 0 {
        return Err(Error::Argument("samples per pair must be at least 1".into()));
    }
    if config.selectors.is_empty() {
        return Err(Error::Argument("no layer selectors given".into()));
    }
    let table = class_index_table(test);
    for &(q, d) in config.pairs.pairs() {
        for c in [q, d] {
            if table.bucket(c as usize).is_empty() {
                return Err(Error::Sampling(format!("class {c} has no images")));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);
    let draws: Vec<(u8, u8, usize, usize)> = config
        .pairs
        .pairs()
        .iter()
        .flat_map(|&(q, d)| std::iter::repeat((q, d)).take(config.samples_per_pair))
        .map(|(q, d)| {
            let qb = table.bucket(q as usize);
            let db = table.bucket(d as usize);
            (q, d, qb[rng.gen_range(0..qb.len())], db[rng.gen_range(0..db.len())])
        })
        .collect();
    let total = draws.len();
    let mut samples = Vec::with_capacity(total * config.selectors.len());
    for (n, &(q, d, qi, di)) in draws.iter().enumerate() {
        let query = &test[qi].pixels;
        let distractor = &test[di].pixels;
        let traces = pair_traces(query, distractor, vit, cevit)?;
        for &sel in &config.selectors {
            let det = detail_for(query, distractor, d as usize, &traces, vit, sel, config.mu)?;
            let du = d as usize;
            samples.push(SampleRecord {
                query_index: qi,
                distractor_index: di,
                query_class: q,
                distractor_class: d,
                selector: sel,
                p_v: det.probs_v[du],
                p_c: det.probs_c[du],
                p_u: det.probs_u[du],
                s_v: det.s_v,
                s_c: det.s_c,
                mean_v: det.m_v.clamped_mean,
                mean_c: det.m_c.clamped_mean,
                mean_u: det.m_u.clamped_mean,
            });
        }
        progress(n + 1, total);
    }
    Ok(DistractionReport::summarize(config.clone(), samples))
}
