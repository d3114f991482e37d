//! Acceptance suite: one test per criterion, each printing a PASS line on
//! success (run with `--nocapture` to see them). Tolerances are pinned in
//! the assertions.

mod common;

use std::collections::BTreeMap;

use common::*;
use rand::seq::SliceRandom;
use rand::Rng;

use xcal_core::bn::{
    accumulate_bn, bn_adjust_calibrate, bn_stats, fold_bn, naive_calibrate, reset_bn,
    CalibrationConfig,
};
use xcal_core::dataset::{generate_domain, Batch, Dataset, LoadOptions};
use xcal_core::fixture;
use xcal_core::gram::{
    channel_norm_stats, discrepancy, gram, load_gram_bundle, mean_gram, FeatureEmbedding,
    GramSummary,
};
use xcal_core::graph::{Graph, GraphBuilder, Metadata};
use xcal_core::histogram::HistogramObserver;
use xcal_core::metrics::{dice, miou, top1_accuracy};
use xcal_core::model_io::load_model;
use xcal_core::pipeline::{evaluate, spearman, EvalTask, ExecMode};
use xcal_core::quant::{dequantize, quantize, QuantParams};
use xcal_core::Tensor;

fn pass(n: u32, name: &str) {
    println!("ACCEPTANCE {n} ({name}): PASS");
}

// ── Criterion 1 ────────────────────────────────────────────────────────────

fn random_conv_bn_graph(rng: &mut rand_chacha::ChaCha8Rng) -> Graph {
    let depth = rng.gen_range(1..=3);
    let hw = rng.gen_range(4..=8usize);
    let mut channels = vec![rng.gen_range(1..=3usize)];
    for _ in 0..depth {
        channels.push(rng.gen_range(1..=4));
    }
    let mut b = GraphBuilder::new(Metadata::identity([1, channels[0], hw, hw])).input("in");
    let mut prev = "in".to_string();
    let mut weights: Vec<(String, Tensor)> = Vec::new();
    for layer in 0..depth {
        let (ci, co) = (channels[layer], channels[layer + 1]);
        let k3 = rng.gen_bool(0.6);
        let (k, pad) = if k3 { (3, 1) } else { (1, 0) };
        let conv = format!("conv{layer}");
        let wname = format!("conv{layer}.w");
        let numel = co * ci * k * k;
        weights.push((
            wname.clone(),
            Tensor::from_f32(
                &[co, ci, k, k],
                (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ),
        ));
        let with_bias = rng.gen_bool(0.5);
        let bias = if with_bias {
            let bname = format!("conv{layer}.b");
            weights.push((
                bname.clone(),
                Tensor::from_f32(&[co], (0..co).map(|_| rng.gen_range(-0.5..0.5)).collect()),
            ));
            Some(bname)
        } else {
            None
        };
        b = b.conv2d(&conv, &prev, &wname, bias.as_deref(), (1, 1), (pad, pad));

        let bn = format!("bn{layer}");
        for (suffix, values) in [
            ("gamma", (0..co).map(|_| rng.gen_range(0.5..2.0) * if rng.gen_bool(0.2) { -1.0 } else { 1.0 }).collect::<Vec<f32>>()),
            ("beta", (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            ("mean", (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            ("var", (0..co).map(|_| rng.gen_range(0.1..4.0)).collect()),
        ] {
            weights.push((format!("{bn}.{suffix}"), Tensor::from_f32(&[co], values)));
        }
        b = b.batchnorm(
            &bn,
            &conv,
            &format!("{bn}.gamma"),
            &format!("{bn}.beta"),
            &format!("{bn}.mean"),
            &format!("{bn}.var"),
            1e-5,
        );
        let relu = format!("relu{layer}");
        b = b.relu(&relu, &bn);
        prev = relu;
    }
    b = b.output("out", &prev);
    for (name, tensor) in weights {
        b = b.weight(&name, tensor);
    }
    b.build().expect("random graph is valid")
}

#[test]
fn criterion_1_bn_fold_equivalence() {
    let mut rng = seeded(42);
    for case in 0..25 {
        let graph = random_conv_bn_graph(&mut rng);
        let folded = fold_bn(&graph).expect("fold succeeds");
        let c = graph.metadata().input_shape[1];
        let hw = graph.metadata().input_shape[2];
        let mut worst = 0.0f32;
        for _ in 0..100 {
            let input = rand_tensor(&mut rng, &[1, c, hw, hw]);
            let (y0, _) = graph.run(&input, &[]).unwrap();
            let (y1, _) = folded.run(&input, &[]).unwrap();
            for (a, b) in y0.as_f32().unwrap().iter().zip(y1.as_f32().unwrap()) {
                worst = worst.max((a - b).abs() / (1.0 + b.abs()));
            }
        }
        assert!(
            worst <= 1e-4,
            "graph {case}: max relative fold error {worst}"
        );
    }
    pass(1, "bn-fold equivalence <= 1e-4 over 25 graphs x 100 inputs");
}

// ── Criterion 2 ────────────────────────────────────────────────────────────

/// Exhaustive search with direct objective evaluation, no prefix sums.
fn brute_force_pair(obs: &HistogramObserver, bits: u8) -> (usize, usize) {
    let n = obs.nbins();
    let width = obs.bin_width();
    let (lo, _) = obs.range();
    let levels = ((1i64 << bits) - 1) as f64;
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..n {
        if obs.boundary(i) > 0.0 {
            continue;
        }
        for j in (i + 1)..=n {
            if obs.boundary(j) < 0.0 {
                continue;
            }
            let a_l = obs.boundary(i);
            let a_h = obs.boundary(j);
            let s = (a_h - a_l) / levels;
            let mut e = 0.0f64;
            for b in 0..n {
                let c = lo as f64 + (b as f64 + 0.5) * width;
                let m = obs.counts()[b];
                if b < i {
                    e += m * (c - a_l) * (c - a_l);
                } else if b >= j {
                    e += m * (c - a_h) * (c - a_h);
                } else {
                    e += m * s * s / 12.0;
                }
            }
            let improves = match best {
                None => true,
                Some((be, bi, bj)) => e < be || (e == be && (i < bi || (i == bi && j > bj))),
            };
            if improves {
                best = Some((e, i, j));
            }
        }
    }
    let (_, i, j) = best.expect("a zero-bracketing pair always exists");
    (i, j)
}

#[test]
fn criterion_2_histogram_search_matches_exhaustive_oracle() {
    let mut rng = seeded(42);
    let mut checked = 0;
    while checked < 200 {
        let nbins = rng.gen_range(1..=64usize);
        let lo = if rng.gen_bool(0.2) {
            0.0
        } else {
            -rng.gen_range(0.1f32..4.0)
        };
        let hi = if rng.gen_bool(0.2) && lo < 0.0 {
            0.0
        } else {
            rng.gen_range(0.1f32..4.0)
        };
        let counts: Vec<f64> = (0..nbins)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    0.0
                } else {
                    rng.gen_range(1..1000) as f64
                }
            })
            .collect();
        if counts.iter().sum::<f64>() == 0.0 {
            continue;
        }
        let obs = HistogramObserver::from_raw(lo, hi, counts).unwrap();
        let bits = [4u8, 6, 8][rng.gen_range(0..3)];
        let got = obs.search(bits).unwrap();
        let expect = brute_force_pair(&obs, bits);
        assert_eq!(
            got.pair, expect,
            "histogram {checked}: nbins {nbins} range [{lo}, {hi}] bits {bits}"
        );
        checked += 1;
    }
    pass(2, "histogram search equals exhaustive oracle on 200 histograms");
}

// ── Criterion 3 ────────────────────────────────────────────────────────────

#[test]
fn criterion_3_round_trip_bound() {
    let mut rng = seeded(42);
    for case in 0..1000 {
        let bits = [4u8, 6, 8][rng.gen_range(0..3)];
        let scale = rng.gen_range(1e-3f32..2.0);
        let qp = if rng.gen_bool(0.5) {
            QuantParams::weight(scale, bits).unwrap()
        } else {
            let zmax = (1i32 << bits) - 1;
            QuantParams::activation(scale, rng.gen_range(0..=zmax), bits).unwrap()
        };
        let lo = qp.range_lo();
        let hi = qp.range_hi();
        let data: Vec<f32> = (0..64).map(|_| rng.gen_range(lo..=hi)).collect();
        let x = Tensor::from_f32(&[64], data.clone());
        let back = dequantize(&quantize(&x, &qp).unwrap()).unwrap();
        for (o, r) in data.iter().zip(back.as_f32().unwrap()) {
            let err = (o - r).abs();
            assert!(
                err <= qp.scale / 2.0 + 1e-6,
                "case {case}: error {err} above s/2 bound (s = {})",
                qp.scale
            );
        }
        if qp.kind == xcal_core::QuantKind::Activation {
            let zero = Tensor::from_f32(&[1], vec![0.0]);
            let rt = dequantize(&quantize(&zero, &qp).unwrap()).unwrap();
            assert_eq!(rt.as_f32().unwrap()[0], 0.0, "case {case}: zero not exact");
        }
    }
    pass(3, "round-trip error <= s/2 + 1e-6 on 1000 tensors, zero exact");
}

// ── Criterion 4 ────────────────────────────────────────────────────────────

#[test]
fn criterion_4_batch_order_independence() {
    let model = load_model(&fixtures_dir().join("tinycnn-a/model.json")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    generate_domain(&fixture::domain_a_calib(), fixture::CALIB_N, dir.path()).unwrap();
    let data = Dataset::load(dir.path(), &LoadOptions::for_model(&model)).unwrap();
    let batches: Vec<Batch> = data.batches(8);
    let cfg = CalibrationConfig::default();

    let (_, reference_qp) = bn_adjust_calibrate(&model, &batches, &cfg).unwrap();
    let reference_json = reference_qp.to_json();
    let mut reference_adjusted = model.clone();
    reset_bn(&mut reference_adjusted).unwrap();
    accumulate_bn(&mut reference_adjusted, &batches).unwrap();

    let bn_ids: Vec<String> = model
        .nodes()
        .iter()
        .filter(|n| matches!(n.op, xcal_core::OpKind::BatchNorm2D { .. }))
        .map(|n| n.id.clone())
        .collect();

    let mut rng = seeded(42);
    for perm in 0..5 {
        let mut shuffled = batches.clone();
        shuffled.shuffle(&mut rng);
        let (_, qp) = bn_adjust_calibrate(&model, &shuffled, &cfg).unwrap();
        assert_eq!(
            qp.to_json(),
            reference_json,
            "permutation {perm}: qparams.json bytes changed"
        );
        let mut adjusted = model.clone();
        reset_bn(&mut adjusted).unwrap();
        accumulate_bn(&mut adjusted, &shuffled).unwrap();
        for id in &bn_ids {
            let a = bn_stats(&adjusted, id).unwrap();
            let b = bn_stats(&reference_adjusted, id).unwrap();
            assert_eq!(a.mean, b.mean, "permutation {perm}: {id} mean not bit-equal");
            assert_eq!(a.var, b.var, "permutation {perm}: {id} var not bit-equal");
        }
    }
    pass(4, "qparams bytes and adjusted statistics exact under 5 permutations");
}

// ── Criteria 5 and 9: the desk-scale cross-domain experiment ──────────────

struct DeskExperiment {
    fp32: f32,
    acc_in_domain: f32,
    acc_naive_c: f32,
    acc_adjusted_c: f32,
}

fn run_desk_experiment(bits: u8) -> DeskExperiment {
    let model = load_model(&fixtures_dir().join("tinycnn-a/model.json")).unwrap();
    let opts = LoadOptions::for_model(&model);
    let dir = tempfile::tempdir().unwrap();
    generate_domain(&fixture::domain_a_eval(), fixture::EVAL_N, &dir.path().join("eval")).unwrap();
    generate_domain(
        &fixture::domain_a_calib(),
        fixture::CALIB_N,
        &dir.path().join("calib"),
    )
    .unwrap();
    generate_domain(
        &fixture::domain_c_severe(),
        fixture::CALIB_N,
        &dir.path().join("severe"),
    )
    .unwrap();
    let eval = Dataset::load(&dir.path().join("eval"), &opts).unwrap();
    let calib = Dataset::load(&dir.path().join("calib"), &opts).unwrap();
    let severe = Dataset::load(&dir.path().join("severe"), &opts).unwrap();

    let cfg = CalibrationConfig {
        bits,
        ..Default::default()
    };
    let (folded, qp_in) = naive_calibrate(&model, &calib.batches(16), &cfg).unwrap();
    let (_, qp_naive_c) = naive_calibrate(&model, &severe.batches(16), &cfg).unwrap();
    let (_, qp_adjusted_c) = bn_adjust_calibrate(&model, &severe.batches(16), &cfg).unwrap();

    let top1 = |mode: ExecMode| evaluate(&folded, mode, &eval, 32, EvalTask::Top1).unwrap();
    DeskExperiment {
        fp32: top1(ExecMode::Fp32),
        acc_in_domain: top1(ExecMode::FakeQuant(&qp_in)),
        acc_naive_c: top1(ExecMode::FakeQuant(&qp_naive_c)),
        acc_adjusted_c: top1(ExecMode::FakeQuant(&qp_adjusted_c)),
    }
}

#[test]
fn criterion_5_desk_scale_cross_domain_experiment() {
    let e = run_desk_experiment(8);
    println!(
        "  k=8: fp32 {:.4} in-domain {:.4} naive-C {:.4} adjusted-C {:.4}",
        e.fp32, e.acc_in_domain, e.acc_naive_c, e.acc_adjusted_c
    );
    assert!(
        e.fp32 >= 0.95,
        "fixture classifier held-out accuracy {} below 0.95",
        e.fp32
    );
    // (a) in-domain calibration costs at most 1 point
    assert!(
        e.acc_in_domain >= e.fp32 - 0.01,
        "(a) in-domain {} vs fp32 {}",
        e.acc_in_domain,
        e.fp32
    );
    // (b) naive severe-domain calibration degrades >= 2 points more
    assert!(
        e.acc_naive_c <= e.acc_in_domain - 0.02,
        "(b) naive-C {} vs in-domain {}",
        e.acc_naive_c,
        e.acc_in_domain
    );
    // (c) BatchNorm adjustment recovers to within 1 point of in-domain
    assert!(
        e.acc_adjusted_c >= e.acc_in_domain - 0.01,
        "(c) adjusted-C {} vs in-domain {}",
        e.acc_adjusted_c,
        e.acc_in_domain
    );
    pass(5, "desk-scale cross-domain experiment at k=8");
}

#[test]
fn criterion_9_six_bit_regime() {
    let e8 = run_desk_experiment(8);
    let e6 = run_desk_experiment(6);
    println!(
        "  naive-C gap: k=8 {:.4}, k=6 {:.4}",
        e8.fp32 - e8.acc_naive_c,
        e6.fp32 - e6.acc_naive_c
    );
    let gap8 = e8.fp32 - e8.acc_naive_c;
    let gap6 = e6.fp32 - e6.acc_naive_c;
    assert!(
        gap6 > gap8,
        "6-bit naive cross-domain gap {gap6} not larger than 8-bit {gap8}"
    );
    pass(9, "6-bit regime completes with a larger naive cross-domain gap");
}

// ── Criterion 6 ────────────────────────────────────────────────────────────

#[test]
fn criterion_6_discrepancy_accuracy_correlation() {
    let model = load_model(&fixtures_dir().join("tinycnn-a/model.json")).unwrap();
    let opts = LoadOptions::for_model(&model);
    let source = load_gram_bundle(&fixtures_dir().join("regression/gram-a")).unwrap();
    assert_eq!(source.len(), 1);

    let dir = tempfile::tempdir().unwrap();
    generate_domain(&fixture::domain_a_eval(), fixture::EVAL_N, &dir.path().join("eval")).unwrap();
    generate_domain(
        &fixture::domain_a_calib(),
        fixture::CALIB_N,
        &dir.path().join("calib"),
    )
    .unwrap();
    let eval = Dataset::load(&dir.path().join("eval"), &opts).unwrap();
    let calib = Dataset::load(&dir.path().join("calib"), &opts).unwrap();
    let cfg = CalibrationConfig::default();
    let (folded, _) = naive_calibrate(&model, &calib.batches(16), &cfg).unwrap();

    let ladder = fixture::domain_ladder();
    assert!(ladder.len() >= 6);
    let mut ds = Vec::new();
    let mut accs = Vec::new();
    for (name, spec) in &ladder {
        let droot = dir.path().join(name);
        generate_domain(spec, fixture::CALIB_N, &droot).unwrap();
        let domain = Dataset::load(&droot, &opts).unwrap();
        let g = mean_gram(&model, fixture::GRAM_TAP, &domain.batches(32)).unwrap();
        let d = discrepancy(&source[0], &g).unwrap();
        let (_, qp) = naive_calibrate(&model, &domain.batches(16), &cfg).unwrap();
        let acc = evaluate(&folded, ExecMode::FakeQuant(&qp), &eval, 32, EvalTask::Top1).unwrap();
        println!("  {name}: D {d:.4e} naive-acc {acc:.4}");
        ds.push(d as f64);
        accs.push(acc as f64);
    }
    let rho = spearman(&ds, &accs);
    println!("  spearman(D, accuracy) = {rho:.3}");
    assert!(rho <= -0.5, "correlation {rho} above -0.5");
    pass(6, "discrepancy/accuracy Spearman correlation <= -0.5");
}

// ── Criterion 7 ────────────────────────────────────────────────────────────

#[test]
fn criterion_7_gram_property_suite() {
    let mut rng = seeded(42);
    for case in 0..100 {
        let channels = rng.gen_range(2..8usize);
        let positions = rng.gen_range(4..32usize);
        let samples = rng.gen_range(2..6usize);
        let embeddings: Vec<FeatureEmbedding> = (0..samples)
            .map(|_| FeatureEmbedding {
                layer: "t".to_string(),
                data: rand_tensor(&mut rng, &[channels, positions]),
            })
            .collect();
        let stats = channel_norm_stats(&embeddings).unwrap();

        let mut mean = vec![0.0f64; channels * channels];
        for e in &embeddings {
            let g = gram(e, &stats).unwrap();
            let gd = g.as_f32().unwrap();
            // symmetry
            for i in 0..channels {
                for j in 0..channels {
                    assert!(
                        (gd[i * channels + j] - gd[j * channels + i]).abs() <= 1e-5,
                        "case {case}: gram not symmetric"
                    );
                }
            }
            // PSD: min eigenvalue >= -1e-4 * trace
            let m = nalgebra::DMatrix::<f64>::from_fn(channels, channels, |i, j| {
                gd[i * channels + j] as f64
            });
            let sym = nalgebra::SymmetricEigen::new(m);
            let min_eig = sym.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            let trace: f64 = (0..channels).map(|i| gd[i * channels + i] as f64).sum();
            assert!(
                min_eig >= -1e-4 * trace.abs(),
                "case {case}: min eigenvalue {min_eig} vs trace {trace}"
            );
            for (acc, v) in mean.iter_mut().zip(gd) {
                *acc += *v as f64;
            }
        }
        let mean: Vec<f32> = mean.iter().map(|v| (*v / samples as f64) as f32).collect();
        let summary = GramSummary {
            layer: "t".to_string(),
            gram: Tensor::from_f32(&[channels, channels], mean.clone()),
            count: samples,
        };

        // D(A, A) = 0 and symmetry in arguments.
        assert_eq!(discrepancy(&summary, &summary).unwrap(), 0.0);
        let other = GramSummary {
            layer: "t".to_string(),
            gram: rand_tensor(&mut rng, &[channels, channels]),
            count: 1,
        };
        assert_eq!(
            discrepancy(&summary, &other).unwrap(),
            discrepancy(&other, &summary).unwrap()
        );

        // Embedding-scale invariance within 1e-5 relative.
        let c = rng.gen_range(0.5f32..20.0);
        let scaled: Vec<FeatureEmbedding> = embeddings
            .iter()
            .map(|e| FeatureEmbedding {
                layer: e.layer.clone(),
                data: Tensor::from_f32(
                    e.data.shape(),
                    e.data.as_f32().unwrap().iter().map(|v| v * c).collect(),
                ),
            })
            .collect();
        let scaled_stats = channel_norm_stats(&scaled).unwrap();
        for (e, se) in embeddings.iter().zip(&scaled) {
            let g0 = gram(e, &stats).unwrap();
            let g1 = gram(se, &scaled_stats).unwrap();
            for (a, b) in g0.as_f32().unwrap().iter().zip(g1.as_f32().unwrap()) {
                let rel = (a - b).abs() / (1.0 + a.abs());
                assert!(rel <= 1e-5, "case {case}: scale {c} changes gram by {rel}");
            }
        }
    }
    pass(7, "gram symmetry, PSD, D properties, scale invariance on 100 fixtures");
}

// ── Criterion 8 ────────────────────────────────────────────────────────────

/// Confusion-matrix mIoU oracle, built independently of the library path.
fn miou_oracle(pred: &[i32], gt: &[i32], classes: usize) -> f32 {
    let mut confusion = vec![0u64; classes * classes];
    for (&p, &g) in pred.iter().zip(gt) {
        confusion[g as usize * classes + p as usize] += 1;
    }
    let mut total = 0.0f64;
    let mut counted = 0usize;
    for c in 0..classes {
        let inter = confusion[c * classes + c];
        let row: u64 = (0..classes).map(|j| confusion[c * classes + j]).sum();
        let col: u64 = (0..classes).map(|i| confusion[i * classes + c]).sum();
        let union = row + col - inter;
        if union == 0 {
            continue;
        }
        total += inter as f64 / union as f64;
        counted += 1;
    }
    (total / counted as f64) as f32
}

#[test]
fn criterion_8_metric_oracles() {
    // top-1 with a tie: argmax breaks toward the lower index, so row 0 is
    // wrong against label 1; hand count 2/3.
    let logits = Tensor::from_f32(&[3, 3], vec![5.0, 5.0, 1.0, 1.0, 3.0, 2.0, 0.0, 1.0, 2.0]);
    let acc = top1_accuracy(&logits, &[1, 1, 2]).unwrap();
    assert_eq!(acc, 2.0 / 3.0);

    // DICE: identical, disjoint, half-overlap, empty-union.
    let p = Tensor::from_u8(&[8], vec![1, 1, 1, 1, 0, 0, 0, 0]);
    let g = Tensor::from_u8(&[8], vec![1, 1, 0, 0, 1, 1, 0, 0]);
    assert_eq!(dice(&p, &p).unwrap(), 1.0);
    assert_eq!(dice(&p, &g).unwrap(), 0.5, "half-overlap case");
    let disjoint = Tensor::from_u8(&[8], vec![0, 0, 0, 0, 1, 1, 1, 1]);
    assert_eq!(dice(&p, &disjoint).unwrap(), 0.0);
    let empty = Tensor::from_u8(&[8], vec![0; 8]);
    assert_eq!(dice(&empty, &empty).unwrap(), 1.0);

    // mIoU hand grid against the confusion-matrix oracle.
    let pred = vec![0, 1, 1, 0, 2, 2, 1, 0, 0];
    let gt = vec![0, 1, 0, 0, 2, 1, 1, 2, 0];
    let got = miou(
        &Tensor::from_i32(&[9], pred.clone()),
        &Tensor::from_i32(&[9], gt.clone()),
        3,
        None,
    )
    .unwrap();
    assert_eq!(got, miou_oracle(&pred, &gt, 3));

    // Perfect prediction.
    let m = Tensor::from_i32(&[4], vec![0, 1, 2, 1]);
    assert_eq!(miou(&m, &m, 3, None).unwrap(), 1.0);

    pass(8, "top-1 / DICE / mIoU equal their independent oracles exactly");
}

// ── Pool-ranking regression (supports criterion 6's frozen fixtures) ──────

#[test]
fn pool_ranking_matches_frozen_regression() {
    let model = load_model(&fixtures_dir().join("tinycnn-a/model.json")).unwrap();
    let opts = LoadOptions::for_model(&model);
    let source = load_gram_bundle(&fixtures_dir().join("regression/gram-a")).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut pool: BTreeMap<String, Vec<GramSummary>> = BTreeMap::new();
    for (name, spec) in fixture::domain_ladder() {
        let droot = dir.path().join(&name);
        generate_domain(&spec, fixture::CALIB_N, &droot).unwrap();
        let domain = Dataset::load(&droot, &opts).unwrap();
        let g = mean_gram(&model, fixture::GRAM_TAP, &domain.batches(32)).unwrap();
        pool.insert(name, vec![g]);
    }
    let (ranked, skipped) = xcal_core::gram::rank_pool(&source, &pool).unwrap();
    assert!(skipped.is_empty());
    let got = xcal_core::gram::ranking_csv(&ranked);
    let frozen =
        std::fs::read_to_string(fixtures_dir().join("regression/ranking.csv")).unwrap();
    assert_eq!(got, frozen, "ranking regression drifted");

    // The mildest ladder rung stays closer to the source than the severe
    // calibration domain (mild < severe ordering, frozen by construction).
    let severe_dir = dir.path().join("severe");
    generate_domain(&fixture::domain_c_severe(), fixture::CALIB_N, &severe_dir).unwrap();
    let severe = Dataset::load(&severe_dir, &opts).unwrap();
    let g_severe = mean_gram(&model, fixture::GRAM_TAP, &severe.batches(32)).unwrap();
    let d_severe = discrepancy(&source[0], &g_severe).unwrap();
    assert!(
        ranked[0].1 < d_severe,
        "mild rung {} should rank below severe {d_severe}",
        ranked[0].1
    );
}
