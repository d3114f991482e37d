//! Canonical desk-scale fixture definitions: the `tinycnn-a` reference
//! architecture and the synthetic domains used by the example experiment,
//! the regression files and the acceptance suite. The trained checkpoint
//! itself is committed under `fixtures/tinycnn-a` and regenerated with the
//! `gen-fixtures` binary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{uniform_sum_normal, DomainSpec, PatternFamily};
use crate::graph::{Graph, GraphBuilder, Metadata};
use crate::tensor::Tensor;

pub const INPUT_SHAPE: [usize; 4] = [1, 3, 32, 32];
pub const NUM_CLASSES: usize = 3;
pub const CONV_CHANNELS: [usize; 3] = [16, 32, 32];
/// Mid-network activation used as the feature extractor for domain
/// discrepancy in the fixture experiments.
pub const GRAM_TAP: &str = "relu2";
/// Node whose output feeds the classifier head.
pub const FEATURE_TAP: &str = "flat";
pub const FEATURE_DIM: usize = CONV_CHANNELS[2] * 4 * 4;

/// Repo-relative location of the committed checkpoint.
pub const MODEL_DIR: &str = "fixtures/tinycnn-a";
/// Repo-relative location of the frozen pool-ranking regression file.
pub const RANKING_CSV: &str = "fixtures/regression/ranking.csv";

pub const TRAIN_N: usize = 960;
pub const EVAL_N: usize = 120;
pub const CALIB_N: usize = 64;

/// Conv-BN-ReLU classifier, six conv layers with two residual connections:
///
/// ```text
/// in -> conv1 -> bn1 -> relu1 -> pool1
///    -> conv2 -> bn2 -> relu2 -> pool2
///    -> conv3 -> bn3 -> relu3 -> conv4 -> bn4 -> relu4 -> add(+pool2)
///    -> conv5 -> bn5 -> relu5 -> conv6 -> bn6 -> relu6 -> add(+res1)
///    -> pool3 -> flat -> fc -> out
/// ```
///
/// The first layer is a fixed oriented filter bank; deeper convolutions are
/// randomly initialized (no conv bias; BatchNorm absorbs it), statistics
/// start at mean 0 / variance 1, and the head starts at zero.
pub fn tinycnn(seed: u64, metadata: Metadata) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let he = |rng: &mut ChaCha8Rng, shape: &[usize]| -> Tensor {
        let fan_in: usize = shape[1..].iter().product();
        let std = (2.0 / fan_in as f32).sqrt();
        let numel = shape.iter().product();
        Tensor::from_f32(
            shape,
            (0..numel).map(|_| std * uniform_sum_normal(rng)).collect(),
        )
    };
    let [c1, c2, c3] = CONV_CHANNELS;
    let conv1_w = first_layer_bank(c1, &mut rng);

    let mut b = GraphBuilder::new(metadata)
        .input("in")
        .conv2d("conv1", "in", "conv1.w", None, (1, 1), (1, 1))
        .batchnorm("bn1", "conv1", "bn1.gamma", "bn1.beta", "bn1.mean", "bn1.var", 1e-5)
        .relu("relu1", "bn1")
        .maxpool("pool1", "relu1", (2, 2), (2, 2))
        .conv2d("conv2", "pool1", "conv2.w", None, (1, 1), (1, 1))
        .batchnorm("bn2", "conv2", "bn2.gamma", "bn2.beta", "bn2.mean", "bn2.var", 1e-5)
        .relu("relu2", "bn2")
        .maxpool("pool2", "relu2", (2, 2), (2, 2))
        .conv2d("conv3", "pool2", "conv3.w", None, (1, 1), (1, 1))
        .batchnorm("bn3", "conv3", "bn3.gamma", "bn3.beta", "bn3.mean", "bn3.var", 1e-5)
        .relu("relu3", "bn3")
        .conv2d("conv4", "relu3", "conv4.w", None, (1, 1), (1, 1))
        .batchnorm("bn4", "conv4", "bn4.gamma", "bn4.beta", "bn4.mean", "bn4.var", 1e-5)
        .relu("relu4", "bn4")
        .add("res1", "relu4", "pool2")
        .conv2d("conv5", "res1", "conv5.w", None, (1, 1), (1, 1))
        .batchnorm("bn5", "conv5", "bn5.gamma", "bn5.beta", "bn5.mean", "bn5.var", 1e-5)
        .relu("relu5", "bn5")
        .conv2d("conv6", "relu5", "conv6.w", None, (1, 1), (1, 1))
        .batchnorm("bn6", "conv6", "bn6.gamma", "bn6.beta", "bn6.mean", "bn6.var", 1e-5)
        .relu("relu6", "bn6")
        .add("res2", "relu6", "res1")
        .maxpool("pool3", "res2", (2, 2), (2, 2))
        .flatten("flat", "pool3")
        .linear("fc", "flat", "fc.w", Some("fc.b"))
        .output("out", "fc")
        .weight("conv1.w", conv1_w)
        .weight("fc.w", Tensor::zeros(&[NUM_CLASSES, FEATURE_DIM]))
        .weight("fc.b", Tensor::zeros(&[NUM_CLASSES]));
    for (name, ci, co) in [
        ("conv2.w", c1, c2),
        ("conv3.w", c2, c3),
        ("conv4.w", c3, c3),
        ("conv5.w", c3, c3),
        ("conv6.w", c3, c3),
    ] {
        let w = he(&mut rng, &[co, ci, 3, 3]);
        b = b.weight(name, w);
    }
    for (bn, c) in [
        ("bn1", c1),
        ("bn2", c2),
        ("bn3", c3),
        ("bn4", c3),
        ("bn5", c3),
        ("bn6", c3),
    ] {
        b = b
            .weight(&format!("{bn}.gamma"), Tensor::filled(&[c], 1.0))
            .weight(&format!("{bn}.beta"), Tensor::zeros(&[c]))
            .weight(&format!("{bn}.mean"), Tensor::zeros(&[c]))
            .weight(&format!("{bn}.var"), Tensor::filled(&[c], 1.0));
    }
    b.build().expect("tinycnn architecture is valid")
}

/// First-layer filter bank: oriented edge, high-frequency and smoothing
/// kernels plus a few random ones, mimicking the band-pass selectivity a
/// trained first layer develops. Selectivity (not scale) is what matters;
/// accumulated statistics absorb the overall magnitude.
fn first_layer_bank(out_channels: usize, rng: &mut ChaCha8Rng) -> Tensor {
    #[rustfmt::skip]
    const BANK: [[f32; 9]; 5] = [
        // horizontal edge
        [-1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        // vertical edge
        [-1.0, 0.0, 1.0, -1.0, 0.0, 1.0, -1.0, 0.0, 1.0],
        // diagonal edge
        [-1.0, -1.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 1.0],
        // high-frequency checker
        [0.5, -0.5, 0.5, -0.5, 0.5, -0.5, 0.5, -0.5, 0.5],
        // smoothing
        [0.25, 0.25, 0.25, 0.25, 0.25, 0.25, 0.25, 0.25, 0.25],
    ];
    let gain = 0.35f32;
    let jitter = 0.05f32;
    let mut data = vec![0.0f32; out_channels * 3 * 9];
    for f in 0..out_channels {
        let kernel = &BANK[f % BANK.len()];
        let main_channel = (f / BANK.len()) % 3;
        for c in 0..3 {
            let weight = if c == main_channel { gain } else { gain * 0.3 };
            for k in 0..9 {
                data[(f * 3 + c) * 9 + k] =
                    weight * kernel[k] + jitter * uniform_sum_normal(rng);
            }
        }
    }
    Tensor::from_f32(&[out_channels, 3, 3, 3], data)
}

fn spec(
    seed: u64,
    family: PatternFamily,
    shift: [f32; 3],
    contrast: f32,
    noise: f32,
) -> DomainSpec {
    DomainSpec {
        seed,
        family,
        shift: shift.to_vec(),
        contrast,
        noise,
        height: INPUT_SHAPE[2],
        width: INPUT_SHAPE[3],
    }
}

/// Source domain: striped patterns with enough sensor noise that the
/// classification margins stay finite.
pub fn domain_a_train() -> DomainSpec {
    spec(1001, PatternFamily::Stripes, [0.0; 3], 1.0, 0.12)
}

pub fn domain_a_eval() -> DomainSpec {
    spec(1002, PatternFamily::Stripes, [0.0; 3], 1.0, 0.12)
}

pub fn domain_a_calib() -> DomainSpec {
    spec(1003, PatternFamily::Stripes, [0.0; 3], 1.0, 0.12)
}

/// Severely shifted calibration domain: smooth high-energy blob content
/// with strong intensity shift, amplified contrast and heavy noise. Run
/// through the source model it produces far wider activations than the
/// source domain, so naively calibrated grids turn coarse.
pub fn domain_c_severe() -> DomainSpec {
    spec(1010, PatternFamily::Blobs, [2.5, 2.0, 3.0], 8.0, 1.6)
}

/// Ladder of domains with monotonically increasing shift away from the
/// source domain; entry 0 is the mildest. The noise-to-structure ratio
/// grows along the ladder, which both decorrelates the feature Gram
/// matrices (larger discrepancy) and inflates activation ranges (worse
/// naive calibration).
pub fn domain_ladder() -> Vec<(String, DomainSpec)> {
    (1..=6)
        .map(|k| {
            let t = k as f32 / 6.0;
            let s = spec(
                1020 + k as u64,
                PatternFamily::Stripes,
                [0.3 * t, 0.24 * t, 0.36 * t],
                1.0 + 0.5 * t,
                0.12 + 2.88 * t,
            );
            (format!("shift{k}"), s)
        })
        .collect()
}
