//! One PASS/FAIL line per acceptance criterion.
//!
//! Criteria 1-5 and 9 are exact properties and fail the test run when
//! violated. Criteria 6-8 are empirical trends on the synthetic benchmark:
//! their verdict is printed with the per-seed numbers, and the test only
//! fails if training or evaluation itself breaks.

mod support;

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::io::Write as _;
use std::time::Instant;

use bmdg::bmdg::{embed_modality, evaluate_embeddings, mix_prototypes, modality_gap, Model, StepDraws, Trainer};
use bmdg::eval::{evaluate, Direction, EmbeddingSet, Protocol, CMC_RANKS};
use bmdg::losses::total_loss;
use bmdg::miverify::{
    random_independent_joint, random_predictor_pair, verify_ce_bound, verify_lower_bound, xor_witness,
};
use bmdg::protodisc::{invert_mask_transform, transform_masks, MaskScores, RigidTransform};
use bmdg::synthdata::{Dataset, Modality};
use bmdg::{Directionality, TrainConfig};
use candle_core::{DType, Device, Tensor};
use rand::Rng;
use support::{rng, small_dataset, stochastic, uniform};

/// Writes straight to the stderr handle so the line survives output capture.
fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    report(&format!("criterion {n} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" }));
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
        .into_iter()
        .map(f64::to_bits)
        .collect()
}

#[test]
fn criterion_1_mixer_exactness() {
    let start = Instant::now();
    let mut r = rng(11);
    let mut endpoint_failures = 0;
    for _ in 0..1000 {
        let shape = [r.random_range(1..5), r.random_range(1..7), r.random_range(1..9)];
        let own = uniform(&shape, -5.0, 5.0, &mut r);
        let other = uniform(&shape, -5.0, 5.0, &mut r);
        let total = r.random_range(1..8);
        let at_start = mix_prototypes(&own, &other, 0, total, &mut r).unwrap();
        let at_end = mix_prototypes(&own, &other, total, total, &mut r).unwrap();
        if bits(&at_start) != bits(&own) || bits(&at_end) != bits(&other) {
            endpoint_failures += 1;
        }
    }
    let own = Tensor::zeros((100, 100, 2), DType::F64, &Device::Cpu).unwrap();
    let other = Tensor::ones((100, 100, 2), DType::F64, &Device::Cpu).unwrap();
    let mixed = mix_prototypes(&own, &other, 2, 4, &mut r).unwrap();
    let rows = mixed.reshape((10_000, 2)).unwrap().to_vec2::<f64>().unwrap();
    let pure = rows.iter().all(|row| row[0] == row[1] && (row[0] == 0.0 || row[0] == 1.0));
    let fraction = rows.iter().filter(|row| row[0] == 1.0).count() as f64 / 1e4;
    let sigma = (0.25f64 / 1e4).sqrt();
    let secs = start.elapsed().as_secs_f64();
    let pass = endpoint_failures == 0 && pure && (fraction - 0.5).abs() <= 3.0 * sigma && secs < 10.0;
    verdict(
        1,
        "mixer exactness",
        pass,
        &format!(
            "{endpoint_failures}/1000 endpoint mismatches; swap fraction {fraction:.4} (3 sigma = {:.4}); {secs:.2}s",
            3.0 * sigma
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_gradient_suite() {
    use bmdg::losses::*;
    use candle_nn::Linear;
    use support::gradient_error;
    let start = Instant::now();
    let mut r = rng(21);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for _ in 0..3 {
        let low = uniform(&[3, 4, 5], -1.0, 1.0, &mut r);
        note("lc", gradient_error(&low, |x| loss_lc(x, 0.5).unwrap()));
        let high = uniform(&[4, 3, 4], -1.0, 1.0, &mut r);
        note("hc", gradient_error(&high, |x| loss_hc(x, &[0, 1, 0, 1], 0.3).unwrap()));
        let f = uniform(&[2, 6, 3], -1.0, 1.0, &mut r);
        let m = stochastic(&[2, 6, 3], &mut r);
        let p = uniform(&[2, 3, 3], -1.0, 1.0, &mut r);
        note("c", gradient_error(&f, |x| loss_compact(x, &m, &p).unwrap()));
        note("c", gradient_error(&m, |x| loss_compact(&f, x, &p).unwrap()));
        note("c", gradient_error(&p, |x| loss_compact(&f, &m, x).unwrap()));
        note("vc", gradient_error(&m, |x| loss_diverse(x).unwrap()));
        let shift: Vec<f64> = (0..36).map(|i| if i % 2 == 0 { 0.2 } else { -0.15 }).collect();
        let moved = (&m + Tensor::from_vec(shift, (2, 6, 3), &Device::Cpu).unwrap()).unwrap();
        note("eq", gradient_error(&m, |x| loss_equivariance(x, &moved, None).unwrap()));
        let layers = (0..3)
            .map(|_| Linear::new(uniform(&[3, 4], -0.5, 0.5, &mut r), Some(uniform(&[3], -0.1, 0.1, &mut r))))
            .collect();
        let bank = PartClassifierBank::from_layers(layers, 0.2);
        note("p", gradient_error(&high, |x| loss_part_id(x, &[0, 2, 1, 2], &bank, None).unwrap()));
        let a = uniform(&[4, 4], -1.0, 1.0, &mut r);
        let b = uniform(&[4, 4], -1.0, 1.0, &mut r);
        note("cc", gradient_error(&a, |x| loss_center_cluster(x, &b, &[0, 1, 1, 2], 10.0).unwrap()));
        let z = uniform(&[5, 4], -3.0, 3.0, &mut r);
        note("ce", gradient_error(&z, |x| cross_entropy(x, &[1, 0, 3, 3, 2]).unwrap()));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.len() == 8 && worst.values().all(|&e| e < 1e-4) && secs < 60.0;
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    verdict(2, "gradient suite", pass, &format!("max rel err {}; {secs:.2}s", detail.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_3_mask_contract() {
    let data = small_dataset(4, 3, 5);
    let mut cfg = support::tiny_config(1, 2);
    cfg.num_prototypes = 4;
    let model = Model::new(&cfg, data.num_identities()).unwrap();
    let mut worst_row: f64 = 0.0;
    for m in [Modality::Visible, Modality::Infrared] {
        let idx = data.modality_indices(m);
        for chunk in idx.chunks(4) {
            let x = bmdg::bmdg::dataset_images(&data, chunk, model.dtype(), model.device()).unwrap();
            worst_row = worst_row.max(model.masks(&x, m).unwrap().row_sum_error().unwrap());
        }
    }
    let vis = data.modality_indices(Modality::Visible);
    let inf = data.modality_indices(Modality::Infrared);
    let v = bmdg::bmdg::dataset_images(&data, &vis[..4], model.dtype(), model.device()).unwrap();
    let i = bmdg::bmdg::dataset_images(&data, &inf[..4], model.dtype(), model.device()).unwrap();
    worst_row = worst_row.max(model.encode(&v, &i).unwrap().masks.row_sum_error().unwrap());

    let mut r = rng(31);
    let mut round_trip_failures = 0;
    let mut cases = 0;
    for _ in 0..50 {
        let (h, w, k) = (r.random_range(3..9), r.random_range(3..9), r.random_range(2..6));
        let masks = MaskScores::new(stochastic(&[2, h * w, k], &mut r), h, w).unwrap();
        let transforms = [
            RigidTransform::HFlip,
            RigidTransform::Translate {
                dy: r.random_range(-2..=2),
                dx: r.random_range(-2..=2),
            },
            RigidTransform::Rotate90 {
                quarters: r.random_range(0..4),
            },
        ];
        for t in transforms {
            if matches!(t, RigidTransform::Rotate90 { quarters } if quarters % 2 == 1) && h != w {
                continue;
            }
            cases += 1;
            let back = invert_mask_transform(&transform_masks(&masks, t).unwrap(), t).unwrap();
            let orig = masks.m.to_vec3::<f64>().unwrap();
            let got = back.m.to_vec3::<f64>().unwrap();
            let valid = t.valid_region(h, w);
            let exact = orig.iter().zip(&got).all(|(a, b)| {
                a.iter()
                    .zip(b)
                    .zip(&valid)
                    .all(|((x, y), &keep)| keep == 0.0 || x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()))
            });
            if !exact || (t.is_lossless() && valid.iter().any(|&v| v != 1.0)) {
                round_trip_failures += 1;
            }
        }
    }
    let pass = worst_row <= 1e-6 && round_trip_failures == 0;
    verdict(
        3,
        "mask contract",
        pass,
        &format!(
            "max row-sum error {worst_row:.1e}; {round_trip_failures}/{cases} inexact round trips (translation compared on surviving pixels)"
        ),
    );
    assert!(pass);
}

/// Rank of each gallery item: number of items strictly ahead of it.
fn oracle(sims: &[f64], q: u32, labels: &[u32]) -> Option<(usize, f64)> {
    let ahead = |j: usize| {
        (0..sims.len())
            .filter(|&o| sims[o] > sims[j] || (sims[o] == sims[j] && o < j))
            .count()
    };
    let ranks: Vec<usize> = (0..sims.len()).filter(|&j| labels[j] == q).map(ahead).collect();
    if ranks.is_empty() {
        return None;
    }
    let first = *ranks.iter().min().unwrap();
    let ap = ranks
        .iter()
        .map(|&rk| ranks.iter().filter(|&&o| o <= rk).count() as f64 / (rk + 1) as f64)
        .sum::<f64>()
        / ranks.len() as f64;
    Some((first, ap))
}

#[test]
fn criterion_4_metric_oracle() {
    let mut r = rng(41);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let ng = r.random_range(1..=6);
        let nq = r.random_range(1..=6);
        let dim = r.random_range(1..4);
        let classes = r.random_range(1..4);
        // Coarse coordinates produce ties.
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..dim).map(|_| r.random_range(-2i32..=2) as f64).collect()).collect()
        };
        let gallery = draw(ng);
        let query = draw(nq);
        let gl: Vec<u32> = (0..ng).map(|_| r.random_range(0..classes)).collect();
        let ql: Vec<u32> = (0..nq).map(|_| r.random_range(0..classes)).collect();
        let cams = vec![0u32; ng];
        let got = evaluate(
            &EmbeddingSet {
                features: &query,
                labels: &ql,
                cameras: &vec![1; nq],
            },
            &EmbeddingSet {
                features: &gallery,
                labels: &gl,
                cameras: &cams,
            },
            Protocol::MultiShot,
            Direction::VisibleToInfrared,
            0,
        )
        .unwrap();
        let mut hits = [0.0; 4];
        let mut ap = 0.0;
        let mut used = 0.0;
        for (q, &y) in query.iter().zip(&ql) {
            let sims: Vec<f64> = gallery.iter().map(|g| bmdg::eval::match_score(q, g)).collect();
            if let Some((first, a)) = oracle(&sims, y, &gl) {
                used += 1.0;
                ap += a;
                for (h, &k) in hits.iter_mut().zip(CMC_RANKS.iter()) {
                    if first < k {
                        *h += 1.0;
                    }
                }
            }
        }
        let scale = |x: f64| if used == 0.0 { 0.0 } else { 100.0 * x / used };
        for k in 0..4 {
            worst = worst.max((got.cmc[k] - scale(hits[k])).abs());
        }
        worst = worst.max((got.map - scale(ap)).abs());
    }
    let pass = worst <= 1e-12;
    verdict(4, "metric oracle", pass, &format!("max |evaluate - oracle| = {worst:.1e} over 50 galleries"));
    assert!(pass);
}

#[test]
fn criterion_5_mutual_information() {
    let start = Instant::now();
    let mut r = rng(51);
    let mut lb_fail = 0;
    let mut lb_worst = f64::INFINITY;
    for _ in 0..200 {
        let rep = verify_lower_bound(&random_independent_joint(&mut r)).unwrap();
        if rep.gap < -1e-9 {
            lb_fail += 1;
        }
        lb_worst = lb_worst.min(rep.gap);
    }
    let xor = verify_lower_bound(&xor_witness()).unwrap();
    let mut ce_fail = 0;
    let mut kl_worst: f64 = 0.0;
    for _ in 0..100 {
        let (pxy, nx, ny, q) = random_predictor_pair(&mut r);
        let rep = verify_ce_bound(&pxy, nx, ny, &q).unwrap();
        if rep.cond_ce < rep.cond_entropy {
            ce_fail += 1;
        }
        kl_worst = kl_worst.max(rep.identity_error);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass =
        lb_fail == 0 && (xor.gap - LN_2).abs() <= 1e-10 && ce_fail == 0 && kl_worst <= 1e-10 && secs < 30.0;
    verdict(
        5,
        "mutual-information checks",
        pass,
        &format!(
            "lower bound {lb_fail}/200 violations (min gap {lb_worst:.1e}); xor gap - ln2 = {:.1e}; \
             ce bound {ce_fail}/100 violations, KL identity error {kl_worst:.1e}; {secs:.2}s",
            xor.gap - LN_2
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_zero_steps_match_baseline() {
    let data = small_dataset(4, 3, 9);
    let mut worst: f64 = 0.0;
    let mut identical = true;
    for seed in 0..3 {
        let mut cfg = support::tiny_config(2, 0);
        cfg.seed = seed;
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        for _ in 0..2 {
            let b = trainer.next_batch().unwrap();
            let w = *trainer.weights();
            let full = trainer.model.objective(&b.visible, &b.infrared, &b.labels, 0, &b.draws).unwrap();
            let base = trainer.model.baseline_objective(&b.visible, &b.infrared, &b.labels, &b.draws).unwrap();
            let a = total_loss(&full, &w).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
            let c = total_loss(&base, &w).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
            identical &= a.to_bits() == c.to_bits();
            worst = worst.max((a - c).abs());
        }
        let neutral = StepDraws::neutral(1, cfg.num_prototypes);
        let b = trainer.next_batch().unwrap();
        assert!(trainer.model.objective(&b.visible, &b.infrared, &b.labels, 1, &neutral).is_err());
    }
    verdict(
        9,
        "zero steps equal the baseline objective",
        identical,
        &format!("6 batches, bitwise equal: {identical}, max |difference| {worst:e}"),
    );
    assert!(identical);
}

// ---------------------------------------------------------------------------
// Trend criteria on the synthetic benchmark

const SEEDS: [u64; 3] = [0, 1, 2];
const TRAIN_IDENTITIES: usize = 40;
const TRAIN_IMAGES: usize = 20;
const TEST_IDENTITIES: usize = 20;
const TEST_IMAGES: usize = 10;
const EPOCHS: usize = 16;
const STEPS: usize = 3;

fn trend_config(seed: u64, steps: usize, mode: Directionality) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        epochs: EPOCHS,
        num_prototypes: 4,
        num_steps: steps,
        directionality: mode,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    cfg.batch.identities = 8;
    cfg.batch.per_identity = 2;
    cfg.backbone.d_low = 8;
    cfg.backbone.d_mid = 16;
    cfg.backbone.d = 16;
    cfg.mask_head.width = 8;
    cfg.ape.d_attn = 16;
    cfg.ape.d_value = 16;
    cfg.ape.d_embed = 16;
    cfg.optim.lr = 3e-3;
    cfg.optim.warmup_epochs = Some(1);
    cfg.optim.milestones = Some(vec![EPOCHS * 3 / 4, EPOCHS * 9 / 10]);
    cfg.mmd.every = 0;
    cfg
}

struct RunResult {
    rank1: f64,
    gap: f64,
}

fn run(train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> RunResult {
    let mut trainer = Trainer::new(cfg, train).unwrap();
    for _ in 0..cfg.epochs {
        let mean = trainer.run_epoch(&mut |_, _, _| Ok(())).unwrap();
        assert!(mean.is_finite());
    }
    let v = embed_modality(&trainer.model, test, Modality::Visible).unwrap();
    let i = embed_modality(&trainer.model, test, Modality::Infrared).unwrap();
    let r1: f64 = [Direction::VisibleToInfrared, Direction::InfraredToVisible]
        .into_iter()
        .map(|d| evaluate_embeddings(&v, &i, d, Protocol::MultiShot, 0).unwrap().rank1())
        .sum::<f64>()
        / 2.0;
    RunResult {
        rank1: r1,
        gap: modality_gap(&v, &i).unwrap(),
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0).max(1.0);
    (m, v)
}

#[test]
fn criteria_6_7_8_training_trends() {
    let start = Instant::now();
    let train = small_dataset(TRAIN_IDENTITIES, TRAIN_IMAGES, 1000);
    let test = small_dataset(TEST_IDENTITIES, TEST_IMAGES, 2000);
    let arms = [
        ("single_step", 0, Directionality::SingleStep),
        ("v_to_i", STEPS, Directionality::VToI),
        ("i_to_v", STEPS, Directionality::IToV),
        ("bidirectional", STEPS, Directionality::Bidirectional),
    ];
    let mut results: BTreeMap<&str, Vec<RunResult>> = BTreeMap::new();
    for (name, steps, mode) in arms {
        for seed in SEEDS {
            let r = run(&train, &test, &trend_config(seed, steps, mode));
            report(&format!("  {name:<13} seed {seed}: rank-1 {:.2}  modality gap {:.4}", r.rank1, r.gap));
            results.entry(name).or_default().push(r);
        }
    }
    let stat = |name: &str, f: fn(&RunResult) -> f64| mean_var(&results[name].iter().map(f).collect::<Vec<_>>());
    let r1 = |name: &str| stat(name, |r| r.rank1);
    let gap = |name: &str| stat(name, |r| r.gap);
    for (name, _, _) in arms {
        let (m, v) = r1(name);
        let (gm, gv) = gap(name);
        report(&format!("  {name:<13} rank-1 mean {m:.2} var {v:.2}; gap mean {gm:.4} var {gv:.6}"));
    }
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    let (bi, base) = (r1("bidirectional").0, r1("single_step").0);
    verdict(
        6,
        "multi-step bidirectional beats single step by 3 rank-1 points",
        bi - base >= 3.0 && minutes < 120.0,
        &format!("T={STEPS} {bi:.2} vs T=0 {base:.2} (delta {:+.2}); {minutes:.1} min for 12 runs", bi - base),
    );
    let (vi, iv) = (r1("v_to_i").0, r1("i_to_v").0);
    verdict(
        7,
        "bidirectional >= one-directional >= single step",
        bi >= vi && bi >= iv && vi >= base && iv >= base,
        &format!("bidirectional {bi:.2}, v_to_i {vi:.2}, i_to_v {iv:.2}, single_step {base:.2}"),
    );
    let (gb, g0) = (gap("bidirectional").0, gap("single_step").0);
    verdict(
        8,
        "modality gap below the single-step baseline",
        gb < g0,
        &format!("bidirectional {gb:.4} vs single_step {g0:.4}"),
    );
}
