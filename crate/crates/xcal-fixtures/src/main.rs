//! Generates the committed desk-scale fixtures: the trained `tinycnn-a`
//! checkpoint and the frozen regression files, then prints the example
//! experiment used by the acceptance suite.
//!
//! The classifier head is fit in closed form (ridge regression on the
//! penultimate features) after BatchNorm statistics have been accumulated
//! on the source domain, so fixture generation needs no gradient training.
//!
//! Usage: `cargo run -p xcal-fixtures --release -- [--out fixtures]`

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use nalgebra::DMatrix;

use xcal_core::bn::{accumulate_bn, naive_calibrate, bn_adjust_calibrate, CalibrationConfig};
use xcal_core::dataset::{generate_domain, Dataset, DomainSpec, LoadOptions};
use xcal_core::fixture::{
    domain_a_calib, domain_a_eval, domain_a_train, domain_c_severe, domain_ladder,
    tinycnn, CALIB_N, EVAL_N, FEATURE_DIM, FEATURE_TAP, GRAM_TAP, INPUT_SHAPE, NUM_CLASSES,
    TRAIN_N,
};
use xcal_core::gram::{mean_gram, rank_pool, ranking_csv, save_gram_summary, GramSummary};
use xcal_core::graph::{Graph, Metadata};
use xcal_core::model_io::save_model;
use xcal_core::pipeline::{evaluate, spearman, EvalTask, ExecMode};
use xcal_core::Tensor;

const MODEL_SEED: u64 = 42;
const BATCH: usize = 32;
const RIDGE_LAMBDA: f64 = 200.0;

struct Scratch {
    dir: PathBuf,
}

impl Scratch {
    fn new() -> Scratch {
        let dir = std::env::temp_dir().join(format!("xcal-fixtures-{}", std::process::id()));
        fs::create_dir_all(&dir).expect("create scratch dir");
        Scratch { dir }
    }

    fn domain(&self, name: &str, spec: &DomainSpec, n: usize) -> PathBuf {
        let path = self.dir.join(name);
        generate_domain(spec, n, &path).expect("generate domain");
        path
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.dir);
    }
}

/// Per-channel mean/std over the raw (unnormalized) samples of a directory.
fn raw_channel_stats(dir: &Path, channels: usize, hw: (usize, usize)) -> (Vec<f32>, Vec<f32>) {
    let ds = Dataset::load(dir, &LoadOptions::raw(channels, hw)).expect("load raw domain");
    let spatial = hw.0 * hw.1;
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    let mut count = 0usize;
    for i in 0..ds.len() {
        let data = ds.sample(i).as_f32().unwrap();
        for c in 0..channels {
            for &v in &data[c * spatial..(c + 1) * spatial] {
                sum[c] += v as f64;
                sq[c] += v as f64 * v as f64;
            }
        }
        count += spatial;
    }
    let mean: Vec<f32> = sum.iter().map(|s| (s / count as f64) as f32).collect();
    let std: Vec<f32> = sq
        .iter()
        .zip(&mean)
        .map(|(s, &m)| ((s / count as f64 - (m as f64) * (m as f64)).max(1e-12)).sqrt() as f32)
        .collect();
    (mean, std)
}

/// Penultimate features and labels for a whole dataset.
fn features(model: &Graph, ds: &Dataset) -> (DMatrix<f64>, Vec<usize>) {
    let labels = ds.labels().expect("fixture domains are labeled").to_vec();
    let mut rows: Vec<f64> = Vec::with_capacity(ds.len() * (FEATURE_DIM + 1));
    for batch in ds.batches(BATCH) {
        let (_, tapped) = model.run(&batch.data, &[FEATURE_TAP]).unwrap();
        let feats = &tapped[FEATURE_TAP];
        let (n, f) = feats.dim2().unwrap();
        assert_eq!(f, FEATURE_DIM);
        let data = feats.as_f32().unwrap();
        for s in 0..n {
            rows.extend(data[s * f..(s + 1) * f].iter().map(|&v| v as f64));
            rows.push(1.0); // bias column
        }
    }
    let n = rows.len() / (FEATURE_DIM + 1);
    (
        DMatrix::from_row_slice(n, FEATURE_DIM + 1, &rows),
        labels,
    )
}

/// Closed-form ridge fit of the classifier head on one-hot targets.
fn fit_head(model: &mut Graph, x: &DMatrix<f64>, labels: &[usize]) {
    let n = x.nrows();
    let d = x.ncols();
    let mut y = DMatrix::<f64>::zeros(n, NUM_CLASSES);
    for (i, &l) in labels.iter().enumerate() {
        y[(i, l)] = 1.0;
    }
    let mut xtx = x.transpose() * x;
    for i in 0..d {
        xtx[(i, i)] += RIDGE_LAMBDA;
    }
    let xty = x.transpose() * y;
    let w = xtx
        .cholesky()
        .expect("ridge normal equations are positive definite")
        .solve(&xty); // (F+1) x K
    let mut fc_w = vec![0.0f32; NUM_CLASSES * FEATURE_DIM];
    let mut fc_b = vec![0.0f32; NUM_CLASSES];
    for k in 0..NUM_CLASSES {
        for f in 0..FEATURE_DIM {
            fc_w[k * FEATURE_DIM + f] = w[(f, k)] as f32;
        }
        fc_b[k] = w[(FEATURE_DIM, k)] as f32;
    }
    model
        .set_weight("fc.w", Tensor::from_f32(&[NUM_CLASSES, FEATURE_DIM], fc_w))
        .unwrap();
    model.set_weight("fc.b", Tensor::from_f32(&[NUM_CLASSES], fc_b)).unwrap();
}

fn top1(model: &Graph, mode: ExecMode, ds: &Dataset) -> f32 {
    evaluate(model, mode, ds, BATCH, EvalTask::Top1).expect("evaluation")
}

fn main() -> ExitCode {
    let mut out_dir = PathBuf::from("fixtures");
    let mut args = std::env::args().skip(1);
    while let Some(arg) = args.next() {
        match arg.as_str() {
            "--out" => out_dir = PathBuf::from(args.next().expect("--out needs a value")),
            other => {
                eprintln!("unknown argument `{other}`");
                return ExitCode::FAILURE;
            }
        }
    }

    let scratch = Scratch::new();
    let hw = (INPUT_SHAPE[2], INPUT_SHAPE[3]);

    println!("== generating domains ==");
    let a_train_dir = scratch.domain("a_train", &domain_a_train(), TRAIN_N);
    let a_eval_dir = scratch.domain("a_eval", &domain_a_eval(), EVAL_N);
    let a_calib_dir = scratch.domain("a_calib", &domain_a_calib(), CALIB_N);
    let c_dir = scratch.domain("c_severe", &domain_c_severe(), CALIB_N);

    let (norm_mean, norm_std) = raw_channel_stats(&a_train_dir, INPUT_SHAPE[1], hw);
    println!("normalization mean {norm_mean:?} std {norm_std:?}");
    let metadata = Metadata {
        input_shape: INPUT_SHAPE,
        norm_mean,
        norm_std,
    };

    let mut model = tinycnn(MODEL_SEED, metadata);
    let opts = LoadOptions::for_model(&model);
    let a_train = Dataset::load(&a_train_dir, &opts).unwrap();
    let a_eval = Dataset::load(&a_eval_dir, &opts).unwrap();
    let a_calib = Dataset::load(&a_calib_dir, &opts).unwrap();
    let c_calib = Dataset::load(&c_dir, &opts).unwrap();

    println!("== accumulating source-domain statistics ==");
    accumulate_bn(&mut model, &a_train.batches(BATCH)).unwrap();

    println!("== fitting classifier head ==");
    let (x, labels) = features(&model, &a_train);
    fit_head(&mut model, &x, &labels);

    let train_acc = top1(&model, ExecMode::Fp32, &a_train);
    let eval_acc = top1(&model, ExecMode::Fp32, &a_eval);
    println!("fp32 train acc {train_acc:.4}  held-out acc {eval_acc:.4}");
    if eval_acc < 0.95 {
        eprintln!("held-out accuracy below 0.95; fixture unusable");
        return ExitCode::FAILURE;
    }

    let model_dir = out_dir.join("tinycnn-a");
    fs::create_dir_all(&model_dir).unwrap();
    save_model(&model, &model_dir.join("model.json")).unwrap();
    println!("wrote {}", model_dir.display());

    // ── Desk experiment ────────────────────────────────────────────────────
    println!("\n== quantization experiment ==");
    for bits in [8u8, 6] {
        let cfg = CalibrationConfig {
            bits,
            ..Default::default()
        };
        let (folded, qp_in) = naive_calibrate(&model, &a_calib.batches(16), &cfg).unwrap();
        let fp32 = top1(&folded, ExecMode::Fp32, &a_eval);
        let acc_in = top1(&folded, ExecMode::FakeQuant(&qp_in), &a_eval);
        let (_, qp_naive_c) = naive_calibrate(&model, &c_calib.batches(16), &cfg).unwrap();
        let acc_naive_c = top1(&folded, ExecMode::FakeQuant(&qp_naive_c), &a_eval);
        let (_, qp_adj_c) = bn_adjust_calibrate(&model, &c_calib.batches(16), &cfg).unwrap();
        let acc_adj_c = top1(&folded, ExecMode::FakeQuant(&qp_adj_c), &a_eval);
        println!(
            "k={bits}: fp32(folded) {fp32:.4} | in-domain {acc_in:.4} | naive-C {acc_naive_c:.4} | bn-adjusted-C {acc_adj_c:.4}"
        );
        if bits == 8 {
            println!("  activation scales (in-domain / naive-C / adjusted-C):");
            for (name, qp) in &qp_in.activations {
                let n = &qp_naive_c.activations[name];
                let a = &qp_adj_c.activations[name];
                println!(
                    "    {name:8} {:.4e} / {:.4e} / {:.4e}",
                    qp.scale, n.scale, a.scale
                );
            }
        }
    }

    // ── Discrepancy ladder ─────────────────────────────────────────────────
    println!("\n== discrepancy vs accuracy ladder (k=8) ==");
    let source_gram = mean_gram(&model, GRAM_TAP, &a_train.batches(BATCH)).unwrap();
    let cfg8 = CalibrationConfig::default();
    let mut ds_values: Vec<f64> = Vec::new();
    let mut accs: Vec<f64> = Vec::new();
    let mut pool: BTreeMap<String, Vec<GramSummary>> = BTreeMap::new();
    let (folded, _) = naive_calibrate(&model, &a_calib.batches(16), &cfg8).unwrap();
    for (name, spec) in domain_ladder() {
        let dir = scratch.domain(&name, &spec, CALIB_N);
        let ds = Dataset::load(&dir, &opts).unwrap();
        let g = mean_gram(&model, GRAM_TAP, &ds.batches(BATCH)).unwrap();
        let d = xcal_core::gram::discrepancy(&source_gram, &g).unwrap();
        let (_, qp) = naive_calibrate(&model, &ds.batches(16), &cfg8).unwrap();
        let acc = top1(&folded, ExecMode::FakeQuant(&qp), &a_eval);
        println!("{name}: D {d:.4e}  naive-acc {acc:.4}");
        ds_values.push(d as f64);
        accs.push(acc as f64);
        pool.insert(name, vec![g]);
    }
    let rho = spearman(&ds_values, &accs);
    println!("spearman(D, acc) = {rho:.3}");

    // ── Frozen regression files ────────────────────────────────────────────
    let (ranked, skipped) = rank_pool(&[source_gram.clone()], &pool).unwrap();
    assert!(skipped.is_empty());
    let reg_dir = out_dir.join("regression");
    fs::create_dir_all(&reg_dir).unwrap();
    fs::write(reg_dir.join("ranking.csv"), ranking_csv(&ranked)).unwrap();
    save_gram_summary(&reg_dir.join("gram-a"), &source_gram, "domain-a-train").unwrap();
    println!("wrote {}", reg_dir.display());

    ExitCode::SUCCESS
}
