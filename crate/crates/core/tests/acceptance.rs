//! Acceptance run against the real MNIST files and the shipped desk-scale
//! checkpoints. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails.
//!
//! Data comes from `CEVIT_DATA_DIR` (default `data/mnist` at the workspace
//! root); checkpoints from `artifacts/vit-desk` and `artifacts/cevit-desk`.

use cevit::attention::{cls_attention, PatchMask, Selector};
use cevit::data::{
    decode_idx, load_split, parse_idx_images, parse_idx_labels, split_paths, LabeledImage, Split, IMAGES_MAGIC,
};
use cevit::distraction::{merge_patches, normalize_mask, run_benchmark, BenchmarkConfig};
use cevit::gradcheck::grad_check;
use cevit::graph::{Graph, Var};
use cevit::knn::{eval_classifier, eval_knn, eval_knn_cevit, knn_euclidean, KnnConfig};
use cevit::model::{encoder_block, Checkpoint, HeadKind, Model, ModelConfig, PatchGrid};
use cevit::train::{held_out_pairs, pair_accuracy, train, ModelKind, TrainConfig};
use cevit::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

const KNN_MIN: f64 = 0.968;
const VIT_MIN: f64 = 0.980;
/// Half a percentage point, in thousandths.
const CEVIT_GAP_PER_MILLE: usize = 5;
const PAIR_ACC_MIN: f32 = 0.95;
const GRAD_TOL: f32 = 1e-3;
const ROW_SUM_TOL: f32 = 1e-5;

fn workspace() -> PathBuf {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    p.canonicalize().unwrap_or(p)
}

fn data_dir() -> PathBuf {
    std::env::var_os("CEVIT_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("data/mnist"))
}

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn check(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn report(&mut self, n: u32, title: &str, started: Instant, result: Result<Outcome>) {
        let (passed, detail) = match result {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            self.failures += 1;
        }
        println!(
            "criterion {n} {}: {title}: {detail} [{:.0}s]",
            if passed { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
    }
}

fn load_model(name: &str, head: HeadKind) -> Result<Model> {
    let ck = Checkpoint::load(workspace().join("artifacts").join(name))?;
    if ck.config().head != head {
        return Err(Error::Config(format!("artifacts/{name} has the wrong head")));
    }
    Ok(ck.model)
}

struct Data {
    train: Vec<LabeledImage>,
    test: Vec<LabeledImage>,
}

fn load_data() -> Result<Data> {
    let dir = data_dir();
    Ok(Data {
        train: load_split(&dir, Split::Train)?,
        test: load_split(&dir, Split::Test)?,
    })
}

fn criterion_knn(data: &Data) -> Result<Outcome> {
    let r = eval_knn(&data.test, &data.train, 15, |_| {})?;
    Ok(Outcome::check(
        r.accuracy >= KNN_MIN,
        format!("accuracy {:.4} ({}/{}), need >= {KNN_MIN}", r.accuracy, r.correct, r.total),
    ))
}

fn criterion_vit(data: &Data, vit: &Model) -> Result<(Outcome, (usize, usize))> {
    let r = eval_classifier(&data.test, vit, |_| {})?;
    Ok((
        Outcome::check(
            r.accuracy >= VIT_MIN,
            format!("accuracy {:.4} ({}/{}), need >= {VIT_MIN}", r.accuracy, r.correct, r.total),
        ),
        (r.correct, r.total),
    ))
}

/// `vit` is the classifier's (correct, total) on the same test set.
fn criterion_cevit_knn(data: &Data, cevit: &Model, vit: Option<(usize, usize)>) -> Result<Outcome> {
    let pairs = held_out_pairs(&data.test, 2000, 0)?;
    let pair_acc = pair_accuracy(cevit, &data.test, &pairs)?;
    let cfg = KnnConfig { k: 15, shortlist: 200, ..KnnConfig::default() };
    let r = eval_knn_cevit(&data.test, &data.train, cevit, &cfg, |_| {})?;
    let Some((vit_correct, vit_total)) = vit else {
        return Ok(Outcome::check(false, format!("accuracy {:.4}, no ViT accuracy to compare with", r.accuracy)));
    };
    if vit_total != r.total {
        return Err(Error::Consistency("ViT and CEViT were scored on different sets".into()));
    }
    // Integer comparison: |Δcorrect| / total <= 5 / 1000.
    let gap = r.correct.abs_diff(vit_correct);
    let close = gap * 1000 <= CEVIT_GAP_PER_MILLE * r.total;
    Ok(Outcome::check(
        close && pair_acc >= PAIR_ACC_MIN,
        format!(
            "accuracy {:.4} vs ViT {:.4}, gap {:.2} pp (need <= 0.5); held-out pair accuracy {pair_acc:.4} (need >= {PAIR_ACC_MIN})",
            r.accuracy,
            vit_correct as f64 / vit_total as f64,
            100.0 * gap as f64 / r.total as f64
        ),
    ))
}

fn criterion_distraction(data: &Data, vit: &Model, cevit: &Model) -> Result<Outcome> {
    let report = run_benchmark(&data.test, vit, cevit, &BenchmarkConfig::default(), |_, _| {})?;
    let mut ok = true;
    let mut parts = Vec::new();
    for sel in Selector::ALL {
        let row = report
            .aggregate_for(sel)
            .ok_or_else(|| Error::Argument(format!("no aggregate row for {sel}")))?;
        ok &= row.mean_s_c > 0.0 && row.mean_s_c > row.mean_s_v;
        parts.push(format!("{sel}: S_C {:.4} S_V {:.4}", row.mean_s_c, row.mean_s_v));
    }
    Ok(Outcome::check(ok, parts.join("; ")))
}

// ---- property summary ----

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn projected(g: &mut Graph, y: Var) -> Result<Var> {
    let w = g.constant(rand_tensor(g.value(y).shape(), 999));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn gradients_ok() -> Result<f32> {
    let mut worst = 0.0f32;
    let x = rand_tensor(&[2, 5, 8], 1);
    let b = rand_tensor(&[8, 6], 2);
    let gamma = rand_tensor(&[8], 3);
    type Op = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;
    let ops: Vec<(Op, Tensor)> = vec![
        (
            Box::new(move |g, x| {
                let b = g.constant(b.clone());
                g.matmul(x, b)
            }),
            rand_tensor(&[5, 8], 6),
        ),
        (
            Box::new(move |g, x| {
                let (ga, be) = (g.constant(gamma.clone()), g.constant(gamma.clone()));
                g.layer_norm(x, ga, be, 1e-5)
            }),
            x.clone(),
        ),
        (Box::new(|g, x| Ok(g.gelu(x))), x.clone()),
        (Box::new(|g, x| Ok(g.sigmoid(x))), x.clone()),
        (Box::new(|g, x| g.softmax(x, 2)), x.clone()),
        (Box::new(|g, x| g.attention(x, 2)), rand_tensor(&[2, 5, 12], 4)),
    ];
    for (op, input) in &ops {
        worst = worst.max(grad_check(|g, v| op(g, v).and_then(|y| projected(g, y)), input, 1e-3)?);
    }
    let logits = rand_tensor(&[4, 10], 5);
    worst = worst.max(grad_check(|g, z| g.softmax_ce_loss(z, &[1, 2, 3, 4]), &logits, 1e-3)?);

    let cfg = ModelConfig { embed_dim: 8, num_heads: 2, mlp_hidden: 16, num_layers: 1, ..ModelConfig::vit() };
    let params: Vec<Tensor> = cfg
        .param_shapes()
        .into_iter()
        .filter(|(n, _)| n.starts_with("encoder.0."))
        .enumerate()
        .map(|(i, (_, s))| {
            let mut t = rand_tensor(&s, 10 + i as u64);
            t.data_mut().iter_mut().for_each(|v| *v *= 0.5);
            t
        })
        .collect();
    worst = worst.max(grad_check(
        |g, xv| {
            let layer: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
            let (y, _) = encoder_block(g, &cfg, &layer, xv)?;
            projected(g, y)
        },
        &x,
        1e-3,
    )?);
    Ok(worst)
}

fn tiny(base: ModelConfig) -> ModelConfig {
    ModelConfig { embed_dim: 16, num_heads: 2, mlp_hidden: 32, num_layers: 2, ..base }
}

fn synthetic(n: usize, seed: u64) -> Vec<LabeledImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| LabeledImage { pixels: (0..784).map(|_| rng.gen::<f32>()).collect(), label: (i % 10) as u8 })
        .collect()
}

fn criterion_properties() -> Result<Outcome> {
    let mut failed = Vec::new();
    let mut note = |ok: bool, name: &str| {
        if !ok {
            failed.push(name.to_string());
        }
    };

    let worst = gradients_ok()?;
    note(worst < GRAD_TOL, "gradient checks");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vit = Model::new(ModelConfig { init_std: 0.3, ..tiny(ModelConfig::vit()) }, &mut rng)?;
    let cevit = Model::new(ModelConfig { init_std: 0.3, ..tiny(ModelConfig::cevit()) }, &mut rng)?;
    let images = synthetic(40, 2);

    let (_, trace) = vit.vit_forward(&images[0].pixels)?;
    let t = trace.tokens();
    let rows_ok = trace
        .layers()
        .iter()
        .flat_map(|l| l.chunks_exact(t))
        .all(|row| (row.iter().sum::<f32>() - 1.0).abs() < ROW_SUM_TOL);
    note(rows_ok, "attention rows sum to one");

    let grid = PatchGrid::new(28, 1, 7)?;
    let roundtrip = images.iter().all(|im| grid.assemble(&grid.patchify(&im.pixels).unwrap()).unwrap() == im.pixels);
    note(roundtrip, "patchify round trip");

    let qp = grid.patchify(&images[0].pixels)?;
    let dp = grid.patchify(&images[1].pixels)?;
    note(
        merge_patches(&qp, &dp, &PatchMask::uniform(7, 0.0))? == qp
            && merge_patches(&qp, &dp, &PatchMask::uniform(7, 1.0))? == dp,
        "blend boundary identities",
    );

    let mask = cls_attention(&trace, Selector::Last);
    let n1 = normalize_mask(&mask, 0.25)?;
    let n2 = normalize_mask(&n1.mask, 0.25)?;
    let fixed = n1.mask.values.iter().zip(&n2.mask.values).all(|(a, b)| (a - b).abs() < 1e-5);
    let mut peaky = vec![0.0; 49];
    peaky[0] = 1.0;
    let clamped = normalize_mask(&PatchMask::new(7, peaky)?, 0.25)?;
    note(
        (!(n1.scaled_mean > 0.0) || fixed)
            && clamped.mask.values[0] == 1.0
            && (clamped.clamped_mean - 1.0 / 49.0).abs() < 1e-6
            && (clamped.scaled_mean - 0.25).abs() < 1e-6,
        "mask normalisation",
    );

    // Brute-force agreement on a 200-reference instance, every k.
    let refs: Vec<LabeledImage> = (0..200)
        .map(|i| LabeledImage {
            pixels: (0..16).map(|_| rng.gen_range(0u8..5) as f32 * 0.25).collect(),
            label: (i * 7 % 10) as u8,
        })
        .collect();
    let query: Vec<f32> = (0..16).map(|_| rng.gen_range(0u8..5) as f32 * 0.25).collect();
    let mut order: Vec<(f64, u8, usize)> = refs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let d = r.pixels.iter().zip(&query).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
            (d, r.label, i)
        })
        .collect();
    order.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut knn_ok = true;
    for k in 1..=200 {
        let mut votes = [0usize; 10];
        let mut sums = [0f64; 10];
        for &(d, l, _) in &order[..k] {
            votes[l as usize] += 1;
            sums[l as usize] += (d as f32).sqrt() as f64;
        }
        let top = *votes.iter().max().unwrap();
        let want = (0..10)
            .filter(|&c| votes[c] == top)
            .min_by(|&a, &b| sums[a].partial_cmp(&sums[b]).unwrap().then(a.cmp(&b)))
            .unwrap() as u8;
        knn_ok &= knn_euclidean(&query, &refs, k)?.predicted_label == want;
    }
    note(knn_ok, "k-NN brute-force agreement");

    let dir = tempfile::tempdir()?;
    let ck = Checkpoint::new(cevit.clone(), TrainConfig::desk_scale(ModelKind::Cevit).meta(0));
    ck.save(dir.path())?;
    let back = Checkpoint::load(dir.path())?;
    note(back.model == ck.model && back.meta == ck.meta, "checkpoint round trip");

    let mut tc = TrainConfig {
        epochs: 2,
        batch_size: 8,
        architecture: tiny(ModelConfig::vit()),
        ..TrainConfig::full(ModelKind::Vit)
    };
    let run = |tc: &TrainConfig| train(tc, &images, &images[..20], |_, _| Ok(()));
    let (a, b) = (run(&tc)?, run(&tc)?);
    let vit_same = a.checkpoint.model == b.checkpoint.model
        && a.log.iter().zip(&b.log).all(|(x, y)| x.mean_loss == y.mean_loss);
    tc = TrainConfig {
        pairs_per_epoch: 32,
        eval_pairs: 16,
        architecture: tiny(ModelConfig::cevit()),
        ..TrainConfig { model: ModelKind::Cevit, ..tc }
    };
    let (a, b) = (run(&tc)?, run(&tc)?);
    let cevit_same = a.checkpoint.model == b.checkpoint.model;
    note(vit_same && cevit_same, "training determinism");

    let bench = BenchmarkConfig { samples_per_pair: 2, ..BenchmarkConfig::default() };
    let r1 = run_benchmark(&images, &vit, &cevit, &bench, |_, _| {})?;
    let r2 = run_benchmark(&images, &vit, &cevit, &bench, |_, _| {})?;
    note(r1 == r2, "benchmark determinism");

    Ok(if failed.is_empty() {
        Outcome::check(true, format!("all checks green (worst gradient error {worst:.2e})"))
    } else {
        Outcome::check(false, format!("failing: {}", failed.join(", ")))
    })
}

fn criterion_idx() -> Result<Outcome> {
    let dir = data_dir();
    let mut parts = Vec::new();
    let mut ok = true;
    for (split, expected) in [(Split::Train, 60_000), (Split::Test, 10_000)] {
        let (ip, lp) = split_paths(&dir, split);
        let images = std::fs::read(&ip)?;
        let labels = std::fs::read(&lp)?;
        let (count, rows, cols, _) = parse_idx_images(&images, &ip)?;
        let nlabels = parse_idx_labels(&labels, &lp)?.len();
        ok &= count == expected && nlabels == expected && rows == 28 && cols == 28;
        parts.push(format!("{split:?} {count}x{rows}x{cols}/{nlabels}"));

        let mut bad = images.clone();
        bad[..4].copy_from_slice(&0x0000_0804u32.to_be_bytes());
        let magic = matches!(decode_idx(&bad, &labels, &ip, &lp), Err(Error::Format { found: 0x804, expected: IMAGES_MAGIC, .. }));
        let short = matches!(
            decode_idx(&images[..images.len() - 1], &labels, &ip, &lp),
            Err(Error::Length { .. })
        ) && matches!(decode_idx(&images, &labels[..100], &ip, &lp), Err(Error::Length { .. }));
        ok &= magic && short;
        if !magic || !short {
            parts.push(format!("{split:?} corruption not rejected"));
        }
    }
    Ok(Outcome::check(ok, parts.join(", ")))
}

fn main() -> ExitCode {
    let mut suite = Suite { failures: 0 };
    println!("acceptance: data from {}", data_dir().display());

    let t = Instant::now();
    let data = load_data();
    let models = (load_model("vit-desk", HeadKind::Classifier10), load_model("cevit-desk", HeadKind::Similarity1));

    match &data {
        Ok(d) => suite.report(1, "Euclidean k-NN (k=15)", t, criterion_knn(d)),
        Err(e) => suite.report(1, "Euclidean k-NN (k=15)", t, Err(Error::Config(e.to_string()))),
    }

    let t = Instant::now();
    let mut vit_acc = None;
    let vit_result = match (&data, &models.0) {
        (Ok(d), Ok(vit)) => criterion_vit(d, vit).map(|(o, acc)| {
            vit_acc = Some(acc);
            o
        }),
        (Err(e), _) | (_, Err(e)) => Err(Error::Config(e.to_string())),
    };
    suite.report(2, "desk-scale ViT accuracy", t, vit_result);

    let t = Instant::now();
    let r = match (&data, &models.1) {
        (Ok(d), Ok(cevit)) => criterion_cevit_knn(d, cevit, vit_acc),
        (Err(e), _) | (_, Err(e)) => Err(Error::Config(e.to_string())),
    };
    suite.report(3, "CEViT + k-NN (shortlist 200, k=15) vs ViT", t, r);

    let t = Instant::now();
    let r = match (&data, &models.0, &models.1) {
        (Ok(d), Ok(vit), Ok(cevit)) => criterion_distraction(d, vit, cevit),
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => Err(Error::Config(e.to_string())),
    };
    suite.report(4, "distraction (mu 0.25, 50 samples, seed 0)", t, r);

    let t = Instant::now();
    suite.report(5, "property summary", t, criterion_properties());

    let t = Instant::now();
    suite.report(6, "IDX headers, counts and corruption", t, criterion_idx());

    if suite.failures == 0 {
        println!("acceptance: all 6 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} of 6 criteria failed", suite.failures);
        ExitCode::FAILURE
    }
}
