//! Acceptance suite. Prints one `PASS` / `FAIL` line per criterion and exits
//! non-zero when any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 4 9`.
//!
//! Every expected value is recomputed here by an independent oracle rather
//! than read back from the library.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Result};
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;

use als_seg::active_learner::{
    init_sizes, run_active_selection_with, sizes_for_target, Learner, Manifest, Oracle, SelectionConfig,
};
use als_seg::dataset::Dataset;
use als_seg::experiment::{
    cmd_select, cmd_train, run_pipeline, synth_sample, generate_synthetic_dataset, ExperimentConfig, Preset, SynthSpec,
    MANIFEST_FILE, MODEL_BASE, SPLIT_FILE,
};
use als_seg::metrics::{accumulate_confusion, miou, shannon_index, simpson_inverse_index, ClassPixelHistogram};
use als_seg::nn::{device, to_f64};
use als_seg::pool::{target_labeled_count, ImageLabel, ImageSample, LabeledRatio, PixelMask, SampleId};
use als_seg::s4gan::{
    cross_entropy_loss, feature_matching_from_features, generator_pass, self_training_loss, Batch,
    Discriminator, FmNorm, GanConfig, PseudoLabelBuffer, SegBackbone, Segmenter, PSEUDO_LOG_FILE,
    TRAIN_LOG_FILE,
};
use als_seg::seed::rng_from_seed;
use als_seg::strategies::{rank, select_top_q, PredictionScores, Strategy};

const TAU: f64 = 0.6;

// Criterion 1
const C1_MATRICES: usize = 100;
const C1_MAX_ROWS: usize = 200;
const C1_MAX_CLASSES: usize = 10;
const C1_TIME: Duration = Duration::from_secs(10);

// Criterion 2
const C2_CONFIGS: usize = 50;
const C2_TIME: Duration = Duration::from_secs(120);

// Criterion 4
const C4_EXACT_TOL: f64 = 1e-9;
const C4_GRAD_REL_TOL: f64 = 1e-3;
/// Gradient components below this magnitude are compared absolutely.
const C4_GRAD_FLOOR: f64 = 1e-7;
const C4_FD_STEP: f64 = 1e-5;
const C4_MAX_PARAMS: usize = 1000;
const C4_TIME: Duration = Duration::from_secs(60);

// Criterion 5
const C5_EXACT_TOL: f64 = 1e-9;
const C5_ASYMPTOTIC_PIXELS: u64 = 100_000;
const C5_ASYMPTOTIC_TOL: f64 = 1e-3;
const C5_TIME: Duration = Duration::from_secs(5);

// Criterion 6
const C6_RELABEL_INSTANCES: usize = 20;
/// Relabeling reorders the per-class sum; allow rounding only.
const C6_RELABEL_TOL: f64 = 1e-12;
const C6_TIME: Duration = Duration::from_secs(5);

// Criterion 8 (a full desk run)
const C8_SEED: u64 = 3;

// Criterion 7
const C7_DATASET_SEED: u64 = 1;
const C7_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const C7_RATIO: f64 = 0.05;
const C7_GAN_ITERATIONS: usize = 1000;
const C7_MAX_GAN_ITERATIONS: usize = 2000;
const C7_REQUIRED_WINS: usize = 4;
const C7_TIME: Duration = Duration::from_secs(30 * 60);

fn sid(i: usize) -> SampleId {
    SampleId::new(format!("s{i:04}")).expect("valid id")
}

// ---------------------------------------------------------------------------
// 1. Strategy rankings against a brute-force oracle

fn oracle_entropy(row: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in row {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

fn oracle_margin(row: &[f64]) -> f64 {
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[0] - sorted[1]
}

/// Most uncertain first, ties broken by ascending id.
fn oracle_order(ids: &[SampleId], uncertainty: &[f64]) -> Vec<SampleId> {
    let mut idx: Vec<usize> = (0..ids.len()).collect();
    idx.sort_by(|&a, &b| uncertainty[b].total_cmp(&uncertainty[a]).then_with(|| ids[a].cmp(&ids[b])));
    idx.into_iter().map(|i| ids[i].clone()).collect()
}

fn random_matrix(rng: &mut impl rand::Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let row = match rng.random_range(0..10) {
            // Exact duplicates and one-hot rows create score ties.
            0 if i > 0 => rows[rng.random_range(0..i)].clone(),
            1 => {
                let mut r = vec![0.0; k];
                r[rng.random_range(0..k)] = 1.0;
                r
            }
            _ => {
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
                let s: f64 = raw.iter().sum::<f64>().max(1e-12);
                raw.iter().map(|v| v / s).collect()
            }
        };
        rows.push(row);
    }
    rows
}

fn criterion_1() -> Result<String> {
    let mut rng = rng_from_seed(101);
    let mut checked = 0;
    for m in 0..C1_MATRICES {
        let n = rng.random_range(1..=C1_MAX_ROWS);
        let k = rng.random_range(2..=C1_MAX_CLASSES);
        let rows = random_matrix(&mut rng, n, k);
        let mut ids: Vec<SampleId> = (0..n).map(sid).collect();
        ids.shuffle(&mut rng);
        let scores = PredictionScores::new(ids.clone(), rows.clone())?;

        let entropy: Vec<f64> = rows.iter().map(|r| oracle_entropy(r)).collect();
        let neg_margin: Vec<f64> = rows.iter().map(|r| -oracle_margin(r)).collect();
        for (strategy, uncertainty) in [(Strategy::Entropy, entropy), (Strategy::Margin, neg_margin)] {
            let expected = oracle_order(&ids, &uncertainty);
            let ranking = rank(strategy, &scores, 0)?;
            let got: Vec<SampleId> = ranking.ids().cloned().collect();
            ensure!(got == expected, "matrix {m}: {strategy} ranking differs from the oracle");
            for q in [1, n.div_ceil(3), n] {
                ensure!(select_top_q(&ranking, q)? == expected[..q], "matrix {m}: {strategy} top-{q} differs");
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} rankings matched exactly"))
}

// ---------------------------------------------------------------------------
// 2. Selection loop invariants

/// Nearest class centroid in mean-colour space; cheap and deterministic.
struct CentroidLearner {
    k: usize,
    centroids: Vec<Option<[f64; 3]>>,
}

fn colour_mean(img: &ImageSample) -> [f64; 3] {
    let chw = img.to_chw();
    let plane = img.height() * img.width();
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = chw[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
    }
    out
}

impl Learner for CentroidLearner {
    fn teach(&mut self, images: &[&ImageSample], labels: &[ImageLabel]) -> als_seg::Result<()> {
        let mut sums = vec![([0.0; 3], 0usize); self.k];
        for (img, l) in images.iter().zip(labels) {
            let m = colour_mean(img);
            let (s, n) = &mut sums[l.class_index()];
            for c in 0..3 {
                s[c] += m[c];
            }
            *n += 1;
        }
        self.centroids = sums.into_iter().map(|(s, n)| (n > 0).then(|| s.map(|v| v / n as f64))).collect();
        Ok(())
    }

    fn predict_proba(&self, images: &[&ImageSample]) -> als_seg::Result<Vec<Vec<f64>>> {
        Ok(images
            .iter()
            .map(|img| {
                let m = colour_mean(img);
                let logits: Vec<f64> = self
                    .centroids
                    .iter()
                    .map(|c| c.map_or(-1.0 / 0.05, |c| -(0..3).map(|i| (m[i] - c[i]).powi(2)).sum::<f64>() / 0.05))
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect())
    }
}

fn small_spec(seed: u64, n: usize, k: usize, size: usize) -> SynthSpec {
    let mut prior = vec![1.0 / (k - 1) as f64; k - 1];
    prior.push(0.0);
    SynthSpec { n_images: n, image_size: (size, size), num_classes: k, class_prior: prior, rare_class_rate: 0.2, ..SynthSpec::desk_default(seed) }
}

fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    let samples = (0..spec.n_images).map(|i| synth_sample(spec, i)).collect::<als_seg::Result<Vec<_>>>()?;
    Ok(Dataset::from_samples(samples, spec.num_classes, spec.num_classes)?)
}

fn criterion_2() -> Result<String> {
    let mut rng = rng_from_seed(202);
    let mut iterations = 0;
    for c in 0..C2_CONFIGS {
        let n = rng.random_range(10..=80);
        let k = rng.random_range(2..=5);
        let dataset = synth_dataset(&small_spec(rng.random(), n, k, 8))?;
        let pool = dataset.ids();
        let target = rng.random_range(1..=n);
        // Half-way between two integers so floor(R * N) is unambiguous.
        let ratio = (target as f64 + 0.5) / n as f64;
        let strategy = [Strategy::Entropy, Strategy::Margin, Strategy::Random][rng.random_range(0..3)];
        let mut cfg = SelectionConfig::new(ratio.min(1.0), strategy, rng.random())?;
        cfg.alpha_init = rng.random_range(0.01..=1.0);
        cfg.beta_q = rng.random_range(0.01..=1.0);
        let expected_target = if ratio > 1.0 { n } else { target };
        let oracle = Oracle::from_dataset(&dataset, &pool)?;

        let run = || -> Result<(Manifest, Vec<String>, usize)> {
            let mut learner = CentroidLearner { k, centroids: vec![None; k] };
            let mut violations = Vec::new();
            let mut last_labeled = 0;
            let mut observed = 0;
            let result = run_active_selection_with(&cfg, &dataset, &pool, &oracle, &mut learner, &mut |it, part| {
                observed += 1;
                let (l, u) = (part.labeled(), part.unlabeled());
                if l.intersection(u).next().is_some() {
                    violations.push(format!("iteration {it}: labeled and unlabeled overlap"));
                }
                if l.union(u).cloned().collect::<BTreeSet<_>>() != pool {
                    violations.push(format!("iteration {it}: partition does not cover the pool"));
                }
                if it > 0 && l.len() <= last_labeled {
                    violations.push(format!("iteration {it}: labeled set did not grow"));
                }
                last_labeled = l.len();
            })?;
            let unique: BTreeSet<&SampleId> = result.labeled_ids.iter().collect();
            if unique.len() != result.labeled_ids.len() {
                violations.push("an id was queried twice".into());
            }
            if result.labeled_ids.len() != expected_target {
                violations.push(format!("terminal |X_L| = {} but target is {expected_target}", result.labeled_ids.len()));
            }
            if observed != result.iterations_run + 1 {
                violations.push("observer skipped an iteration".into());
            }
            Ok((Manifest::from_selection(&result, "acceptance", cfg.seed), violations, result.iterations_run))
        };
        let (first, violations, its) = run()?;
        ensure!(violations.is_empty(), "config {c}: {}", violations.join("; "));
        let (second, _, _) = run()?;
        ensure!(first.to_text() == second.to_text(), "config {c}: manifests differ between identical runs");
        iterations += its;
    }
    Ok(format!("{C2_CONFIGS} configs, {iterations} query iterations"))
}

// ---------------------------------------------------------------------------
// 3. Sizing arithmetic

fn criterion_3() -> Result<String> {
    // ceil(0.1 * 34) = 4 and floor(0.5 * 4) = 2.
    let sizes = sizes_for_target(34, 0.1, 0.5)?;
    ensure!((sizes.init_size, sizes.per_query) == (4, 2), "X_NL=34 gave {sizes:?}");

    // Published labeled counts for the 642-image pool.
    for (ratio, expected) in [(0.02, 12), (0.05, 32), (0.125, 80)] {
        let got = target_labeled_count(LabeledRatio::new(ratio)?, 642)?;
        ensure!(got == expected, "R={ratio}: {got} labeled, expected {expected}");
        let mut cfg = SelectionConfig::new(ratio, Strategy::Entropy, 0)?;
        cfg.alpha_init = 0.1;
        cfg.beta_q = 0.5;
        let s = init_sizes(&cfg, 642)?;
        let init = ((expected as f64) * 0.1).ceil() as usize;
        ensure!(s.target == expected && s.init_size == init && s.per_query == (init / 2).max(1), "R={ratio}: {s:?}");
    }
    Ok("34 -> (4, 2); 642 -> 12 / 32 / 80".into())
}

// ---------------------------------------------------------------------------
// 4. Losses and generator gradient

fn map_tensor(values: Vec<f64>, n: usize, k: usize, h: usize, w: usize) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, (n, k, h, w), &device())?)
}

fn random_masks(rng: &mut impl rand::Rng, n: usize, k: usize, h: usize, w: usize) -> Result<Vec<PixelMask>> {
    (0..n)
        .map(|_| Ok(PixelMask::new(h, w, k, (0..h * w).map(|_| rng.random_range(0..k) as u8).collect())?))
        .collect()
}

fn loss_identities() -> Result<()> {
    let mut rng = rng_from_seed(404);
    let (n, h, w) = (2, 3, 4);
    for k in [2usize, 4, 7] {
        let masks = random_masks(&mut rng, n, k, h, w)?;
        let mut onehot = vec![0.0; n * k * h * w];
        for (i, m) in masks.iter().enumerate() {
            for (p, &c) in m.classes().iter().enumerate() {
                onehot[(i * k + c as usize) * h * w + p] = 1.0;
            }
        }
        let perfect = to_f64(&cross_entropy_loss(&map_tensor(onehot, n, k, h, w)?, &masks)?)?;
        ensure!(perfect.abs() <= C4_EXACT_TOL, "K={k}: L_ce on perfect predictions = {perfect}");
        let uniform = to_f64(&cross_entropy_loss(&map_tensor(vec![1.0 / k as f64; n * k * h * w], n, k, h, w)?, &masks)?)?;
        ensure!((uniform - (k as f64).ln()).abs() <= C4_EXACT_TOL, "K={k}: L_ce on uniform predictions = {uniform}");
    }

    let probs = map_tensor(vec![0.7, 0.7, 0.7, 0.7, 0.3, 0.3, 0.3, 0.3], 1, 2, 2, 2)?;
    for conf in [0.0, 0.3, 0.59, 0.5999999999] {
        let st = to_f64(&self_training_loss(&probs, conf, TAU)?)?;
        ensure!(st == 0.0, "L_st = {st} at d_conf {conf} < tau");
    }
    let st = to_f64(&self_training_loss(&probs, 0.6, TAU)?)?;
    ensure!((st + 0.7f64.ln()).abs() <= C4_EXACT_TOL, "L_st at the gate = {st}");

    let feats = Tensor::from_vec((0..24).map(|_| rng.random_range(-2.0..2.0f64)).collect::<Vec<_>>(), (4, 6), &device())?;
    for norm in [FmNorm::L1, FmNorm::L2] {
        let fm = to_f64(&feature_matching_from_features(&feats, &feats.copy()?, norm)?)?;
        ensure!(fm == 0.0, "{norm:?} L_fm on identical statistics = {fm}");
    }
    Ok(())
}

fn toy_batch(rng: &mut impl rand::Rng, prefix: &str, n: usize, k: usize, with_masks: bool) -> Result<Batch> {
    let (c, h, w) = (3, 8, 8);
    let images = Tensor::from_vec((0..n * c * h * w).map(|_| rng.random_range(0.0..1.0f64)).collect::<Vec<_>>(), (n, c, h, w), &device())?;
    let masks = if with_masks { random_masks(rng, n, k, h, w)? } else { vec![] };
    Ok(Batch {
        ids: (0..n).map(|i| SampleId::new(format!("{prefix}{i}")).expect("valid")).collect(),
        origins: vec![(0, 0); n],
        images,
        masks,
    })
}

/// Central finite differences of the full generator objective against
/// autograd, over every segmenter parameter.
fn generator_gradient_check() -> Result<(usize, f64)> {
    let k = 2;
    let mut rng = rng_from_seed(405);
    let seg = Segmenter::new(SegBackbone::EncoderDecoder, 3, k, 2, DType::F64, &mut rng_from_seed(1))?;
    let disc = Discriminator::new(3 + k, &[3, 3], 0.0, DType::F64, &mut rng_from_seed(2))?;
    let total_params = seg.store.num_trainable() + disc.store.num_trainable();
    ensure!(total_params <= C4_MAX_PARAMS, "toy model has {total_params} parameters");
    // Zero-initialised biases put some units exactly on a ReLU kink and some
    // pixels on an exact arg-max tie; move to a generic point first.
    for var in seg.store.trainable() {
        let jitter = Tensor::from_vec((0..var.elem_count()).map(|_| rng.random_range(-0.1..0.1f64)).collect::<Vec<_>>(), var.shape(), &device())?;
        var.set(&(var.as_tensor() + jitter)?)?;
    }

    let labeled = toy_batch(&mut rng, "l", 2, k, true)?;
    let unlabeled = toy_batch(&mut rng, "u", 2, k, false)?;
    let mut config = GanConfig::new(k);
    // A zero threshold keeps the self-training term active for every image.
    config.tau = 0.0;
    let loss = || -> Result<f64> { Ok(to_f64(&generator_pass(&seg, &disc, &config, None, &labeled, Some(&unlabeled))?.total)?) };

    let pass = generator_pass(&seg, &disc, &config, None, &labeled, Some(&unlabeled))?;
    for (name, t) in [("ce", &pass.ce), ("fm", &pass.fm), ("st", &pass.st)] {
        ensure!(to_f64(t)? > 0.0, "toy generator term {name} is zero; the check would not cover it");
    }
    let grads = pass.total.backward()?;

    let mut worst: f64 = 0.0;
    for var in seg.store.trainable() {
        let analytic = grads.get(var.as_tensor()).map(|g| g.flatten_all()?.to_vec1::<f64>()).transpose()?;
        let analytic = analytic.unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let shape = var.shape().clone();
        let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        for (i, &a) in analytic.iter().enumerate() {
            let eval_at = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), &device())?)?;
                loss()
            };
            let fd = (eval_at(C4_FD_STEP)? - eval_at(-C4_FD_STEP)?) / (2.0 * C4_FD_STEP);
            var.set(&Tensor::from_vec(base.clone(), shape.clone(), &device())?)?;
            let scale = a.abs().max(fd.abs());
            let err = if scale < C4_GRAD_FLOOR { (a - fd).abs() / C4_GRAD_FLOOR } else { (a - fd).abs() / scale };
            worst = worst.max(err);
            ensure!(err <= C4_GRAD_REL_TOL, "parameter element {i}: autograd {a} vs finite difference {fd}");
        }
    }
    Ok((total_params, worst))
}

fn criterion_4() -> Result<String> {
    loss_identities()?;
    let (params, worst) = generator_gradient_check()?;
    Ok(format!("loss identities exact; {params}-parameter toy model, worst relative gradient error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 5. Diversity indices

fn pairwise_differing_fraction(pixels: &[u8]) -> f64 {
    let (mut differ, mut total) = (0u64, 0u64);
    for i in 0..pixels.len() {
        for j in i + 1..pixels.len() {
            total += 1;
            differ += (pixels[i] != pixels[j]) as u64;
        }
    }
    differ as f64 / total as f64
}

fn criterion_5() -> Result<String> {
    let single = ClassPixelHistogram::new(vec![0, 57, 0, 0]);
    ensure!(shannon_index(&single)? == 0.0, "Shannon of a single class");
    ensure!(simpson_inverse_index(&single)? == 0.0, "Simpson of a single class");

    let mut uniform = ClassPixelHistogram::new(vec![0; 4]);
    uniform.add_mask(&PixelMask::new(2, 4, 4, vec![0, 1, 2, 3, 3, 2, 1, 0])?)?;
    let h = shannon_index(&uniform)?;
    ensure!((h - 4f64.ln()).abs() <= C5_EXACT_TOL, "Shannon of uniform 4-class = {h}");

    let pixels = [0u8, 0, 1, 1];
    let enumerated = pairwise_differing_fraction(&pixels);
    let d = simpson_inverse_index(&ClassPixelHistogram::new(vec![2, 2]))?;
    ensure!((enumerated - 2.0 / 3.0).abs() <= C5_EXACT_TOL, "pair enumeration gave {enumerated}");
    ensure!((d - enumerated).abs() <= C5_EXACT_TOL, "Simpson (2,2) = {d}, enumeration {enumerated}");

    let mut rng = rng_from_seed(505);
    for _ in 0..10 {
        let k = rng.random_range(2..8);
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = weights.iter().sum();
        let mut counts: Vec<u64> = weights.iter().map(|w| (w / s * C5_ASYMPTOTIC_PIXELS as f64) as u64).collect();
        counts[0] += C5_ASYMPTOTIC_PIXELS - counts.iter().sum::<u64>();
        let total = C5_ASYMPTOTIC_PIXELS as f64;
        let limit = 1.0 - counts.iter().map(|&c| (c as f64 / total).powi(2)).sum::<f64>();
        let d = simpson_inverse_index(&ClassPixelHistogram::new(counts))?;
        ensure!((d - limit).abs() <= C5_ASYMPTOTIC_TOL, "Simpson {d} vs 1 - sum p^2 = {limit}");
    }
    Ok("exact cases and 10 asymptotic histograms agree".into())
}

// ---------------------------------------------------------------------------
// 6. mIoU

/// IoU per class from pixel counts, averaged over classes present in either mask.
fn oracle_miou(pred: &[u8], gt: &[u8], k: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..k as u8 {
        let tp = pred.iter().zip(gt).filter(|&(&p, &g)| p == c && g == c).count();
        let fp = pred.iter().zip(gt).filter(|&(&p, &g)| p == c && g != c).count();
        let fn_ = pred.iter().zip(gt).filter(|&(&p, &g)| p != c && g == c).count();
        if tp + fp + fn_ > 0 {
            ious.push(tp as f64 / (tp + fp + fn_) as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

fn criterion_6() -> Result<String> {
    let gt = PixelMask::new(2, 2, 2, vec![0, 0, 1, 1])?;
    let pred = PixelMask::new(2, 2, 2, vec![0, 1, 1, 1])?;
    ensure!(miou(&accumulate_confusion(&gt, &gt, 2)?)? == 1.0, "identity masks");
    let m = miou(&accumulate_confusion(&pred, &gt, 2)?)?;
    // IoU_0 = 1 / (1 + 0 + 1), IoU_1 = 2 / (2 + 1 + 0).
    let hand = (1.0 / 2.0 + 2.0 / 3.0) / 2.0;
    ensure!(m == hand && (m - 7.0 / 12.0).abs() <= f64::EPSILON, "2x2 case gave {m}");

    let mut rng = rng_from_seed(606);
    for i in 0..C6_RELABEL_INSTANCES {
        let k = rng.random_range(2..=6);
        let (h, w) = (rng.random_range(2..12), rng.random_range(2..12));
        let g: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..k) as u8).collect();
        let p: Vec<u8> = g.iter().map(|&c| if rng.random_bool(0.3) { rng.random_range(0..k) as u8 } else { c }).collect();
        let mut perm: Vec<u8> = (0..k as u8).collect();
        perm.shuffle(&mut rng);
        let relabel = |v: &[u8]| v.iter().map(|&c| perm[c as usize]).collect::<Vec<u8>>();
        let base = miou(&accumulate_confusion(&PixelMask::new(h, w, k, p.clone())?, &PixelMask::new(h, w, k, g.clone())?, k)?)?;
        let moved = miou(&accumulate_confusion(
            &PixelMask::new(h, w, k, relabel(&p))?,
            &PixelMask::new(h, w, k, relabel(&g))?,
            k,
        )?)?;
        let oracle = oracle_miou(&p, &g, k);
        ensure!((base - moved).abs() <= C6_RELABEL_TOL, "instance {i}: {base} vs relabeled {moved}");
        ensure!((base - oracle).abs() <= C6_RELABEL_TOL, "instance {i}: {base} vs pixel-count oracle {oracle}");
    }
    Ok(format!("7/12 reproduced; {C6_RELABEL_INSTANCES} relabelings invariant"))
}

// ---------------------------------------------------------------------------
// 7. Desk-scale directionality

/// Shared settings for every criterion-7 run. The preset supplies the
/// selection and loss weights; the rest are desk-scale choices.
fn desk_config(data: &Path, out: &Path, seed: u64, strategy: Strategy) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_preset(Preset::Paper);
    cfg.dataset_path = data.to_path_buf();
    cfg.output_dir = out.to_path_buf();
    cfg.seed = seed;
    cfg.apply_text(&format!(
        "selection.labeled_ratio={C7_RATIO}\n\
         selection.strategy={strategy}\n\
         selection.learner.lr=0.05\n\
         selection.learner.lr_step_epochs=50\n\
         gan.iterations={C7_GAN_ITERATIONS}\n\
         gan.seg_width=8\n"
    ))?;
    Ok(cfg)
}

fn criterion_7() -> Result<String> {
    assert!(C7_GAN_ITERATIONS <= C7_MAX_GAN_ITERATIONS);
    let root = tempfile::tempdir()?;
    let data = root.path().join("data");
    let spec = SynthSpec::desk_default(C7_DATASET_SEED);
    ensure!(spec.n_images == 200 && spec.image_size == (32, 32) && spec.num_classes == 4 && spec.rare_class_rate == 0.1);
    generate_synthetic_dataset(&spec, &data)?;

    let mut rows = Vec::new();
    for &seed in &C7_SEEDS {
        let mut pair = Vec::new();
        for strategy in [Strategy::Entropy, Strategy::Random] {
            let out = root.path().join(format!("{strategy}-{seed}"));
            let m = run_pipeline(&desk_config(&data, &out, seed, strategy)?)?;
            ensure!(m.manifest.entries.len() == 8, "expected floor(0.05 * 160) = 8 labels");
            pair.push(m);
        }
        println!(
            "    seed {seed}: entropy miou={:.4} shannon={:.4} | random miou={:.4} shannon={:.4}",
            pair[0].miou, pair[0].shannon, pair[1].miou, pair[1].shannon
        );
        rows.push(pair);
    }
    let miou_wins = rows.iter().filter(|p| p[0].miou >= p[1].miou).count();
    let random_shannon = rows.iter().map(|p| p[1].shannon).sum::<f64>() / rows.len() as f64;
    let shannon_wins = rows.iter().filter(|p| p[0].shannon > random_shannon).count();
    let summary = format!(
        "mIoU entropy >= random in {miou_wins}/5 pairs; Shannon above random mean {random_shannon:.4} in {shannon_wins}/5 seeds"
    );
    if miou_wins < C7_REQUIRED_WINS || shannon_wins < C7_REQUIRED_WINS {
        bail!("{summary}");
    }
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 8. Self-training gate audit

fn criterion_8() -> Result<String> {
    let root = tempfile::tempdir()?;
    let data = root.path().join("data");
    generate_synthetic_dataset(&SynthSpec::desk_default(C7_DATASET_SEED), &data)?;
    let cfg = desk_config(&data, &root.path().join("run"), C8_SEED, Strategy::Random)?;
    ensure!(cfg.gan.tau == TAU);
    cmd_select(&cfg)?;
    let outcome = cmd_train(&cfg, None, None, None)?;
    let unlabeled = fs::read_to_string(cfg.output_dir.join(SPLIT_FILE))?;
    let manifest = Manifest::read(&cfg.output_dir.join(MANIFEST_FILE))?.id_set();
    let unlabeled: BTreeSet<String> = unlabeled
        .lines()
        .filter_map(|l| l.split_once('\t'))
        .filter(|(id, split)| *split == "train" && !manifest.contains(&SampleId::new(*id).expect("valid id")))
        .map(|(id, _)| id.to_string())
        .collect();

    let log = fs::read_to_string(cfg.output_dir.join(PSEUDO_LOG_FILE))?;
    let mut logged: HashMap<(usize, String), f64> = HashMap::new();
    for line in log.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        ensure!(f.len() == 3, "malformed pseudo-label log line {line:?}");
        let (it, id, conf): (usize, &str, f64) = (f[0].parse()?, f[1], f[2].parse()?);
        ensure!(conf >= TAU, "iteration {it}: {id} entered the buffer at confidence {conf}");
        ensure!(unlabeled.contains(id), "{id} is not an unlabeled training image");
        logged.insert((it, id.to_string()), conf);
    }
    ensure!(!logged.is_empty(), "no pseudo-label ever passed the gate; the audit would be vacuous");

    let buffer = PseudoLabelBuffer::from_json(&fs::read_to_string(cfg.output_dir.join("model.buffer.json"))?)?;
    ensure!(buffer.len() == outcome.final_buffer_size && buffer.len() > 0);
    for (id, entry) in buffer.iter() {
        ensure!(entry.confidence >= TAU, "final buffer holds {id} at {}", entry.confidence);
        let conf = logged.get(&(entry.iteration, id.to_string()));
        ensure!(conf == Some(&entry.confidence), "final buffer entry {id} is not in the log");
    }
    let train_rows = fs::read_to_string(cfg.output_dir.join(TRAIN_LOG_FILE))?.lines().count();
    ensure!(train_rows == C7_GAN_ITERATIONS, "training log has {train_rows} rows");
    Ok(format!(
        "{} insertions over {C7_GAN_ITERATIONS} iterations, {} in the final buffer, all at confidence >= {TAU}",
        logged.len(),
        buffer.len()
    ))
}

// ---------------------------------------------------------------------------
// 9. Resume equivalence

fn criterion_9() -> Result<String> {
    let root = tempfile::tempdir()?;
    let data = root.path().join("data");
    generate_synthetic_dataset(&small_spec(909, 40, 3, 16), &data)?;
    let config = |out: &str| -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_preset(Preset::Paper);
        cfg.dataset_path = data.clone();
        cfg.output_dir = root.path().join(out);
        cfg.seed = 9;
        cfg.apply_text(
            "selection.labeled_ratio=0.2\nselection.learner.epochs=2\n\
             gan.iterations=16\ngan.crop_size=12x12\ngan.seg_width=4\ngan.disc_channels=8,16\ngan.gen_lr=0.01\n",
        )?;
        Ok(cfg)
    };
    let whole = config("whole")?;
    cmd_select(&whole)?;
    cmd_train(&whole, None, None, None)?;

    let split = config("split")?;
    cmd_select(&split)?;
    cmd_train(&split, None, None, Some(7))?;
    ensure!(fs::read_to_string(split.output_dir.join(TRAIN_LOG_FILE))?.lines().count() == 7, "interrupted run logged past the stop");
    cmd_train(&split, None, Some(&split.output_dir.join(MODEL_BASE)), None)?;

    for file in [TRAIN_LOG_FILE, PSEUDO_LOG_FILE, "model.safetensors", "model.buffer.json"] {
        let (a, b) = (fs::read(whole.output_dir.join(file))?, fs::read(split.output_dir.join(file))?);
        ensure!(a == b, "{file} differs after resume");
    }
    let rows = fs::read_to_string(whole.output_dir.join(TRAIN_LOG_FILE))?.lines().count();
    ensure!(rows == 16, "expected 16 log rows, found {rows}");
    Ok("16-iteration run resumed at 7 is byte-identical (logs, weights, buffer)".into())
}

// ---------------------------------------------------------------------------

type Criterion = fn() -> Result<String>;

fn main() {
    let criteria: [(usize, &str, Criterion, Duration); 9] = [
        (1, "strategy rankings match brute force", criterion_1, C1_TIME),
        (2, "selection loop invariants", criterion_2, C2_TIME),
        (3, "sizing arithmetic", criterion_3, Duration::MAX),
        (4, "loss identities and generator gradient", criterion_4, C4_TIME),
        (5, "diversity indices", criterion_5, C5_TIME),
        (6, "mIoU", criterion_6, C6_TIME),
        (7, "desk-scale directionality", criterion_7, C7_TIME),
        (8, "self-training gate audit", criterion_8, Duration::MAX),
        (9, "resume equivalence", criterion_9, Duration::MAX),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();

    let mut failed = 0;
    for (n, name, run, limit) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(anyhow::anyhow!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > limit => Err(anyhow::anyhow!("{detail}; took {elapsed:.1?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail} ({elapsed:.1?})"),
            Err(e) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {e:#} ({elapsed:.1?})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
