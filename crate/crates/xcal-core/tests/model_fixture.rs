//! Integration tests around the committed `tinycnn-a` checkpoint: loading,
//! the zero-input bias-propagation oracle, and tap extraction equality.

mod common;

use common::*;
use xcal_core::dataset::Batch;
use xcal_core::gram::extract_embeddings;
use xcal_core::model_io::{load_model, save_model};
use xcal_core::{OpKind, Tensor};

fn load_fixture() -> xcal_core::Graph {
    load_model(&fixtures_dir().join("tinycnn-a/model.json")).expect("fixture checkpoint loads")
}

#[test]
fn fixture_loads_with_declared_input_shape() {
    let g = load_fixture();
    assert_eq!(g.metadata().input_shape, [1, 3, 32, 32]);
    assert_eq!(g.input_id(), "in");
    // The checkpoint survives a save/load round trip bit-exactly.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_model(&g, &path).unwrap();
    assert_eq!(load_model(&path).unwrap(), g);
}

/// Hand-wired forward pass of the fixture architecture built from the
/// independent naive kernels; on an all-zero image this reduces to
/// propagating the BatchNorm shifts ("biases") through the network.
#[test]
fn zero_input_logits_match_bias_propagation_oracle() {
    let g = load_fixture();
    let input = Tensor::zeros(&[1, 3, 32, 32]);
    let (logits, _) = g.run(&input, &[]).unwrap();

    let w = |name: &str| g.weight(name).unwrap();
    let vecf = |name: &str| w(name).as_f32().unwrap().to_vec();
    let bn = |x: &Tensor, stem: &str| -> Tensor {
        batchnorm_naive(
            x,
            &vecf(&format!("{stem}.mean")),
            &vecf(&format!("{stem}.var")),
            &vecf(&format!("{stem}.gamma")),
            &vecf(&format!("{stem}.beta")),
            1e-5,
        )
    };
    let relu = |x: &Tensor| -> Tensor {
        Tensor::from_f32(
            x.shape(),
            x.as_f32().unwrap().iter().map(|v| v.max(0.0)).collect(),
        )
    };

    let c1 = conv2d_naive(&input, w("conv1.w"), None, (1, 1), (1, 1));
    let p1 = maxpool_naive(&relu(&bn(&c1, "bn1")), (2, 2), (2, 2));
    let c2 = conv2d_naive(&p1, w("conv2.w"), None, (1, 1), (1, 1));
    let p2 = maxpool_naive(&relu(&bn(&c2, "bn2")), (2, 2), (2, 2));
    let c3 = conv2d_naive(&p2, w("conv3.w"), None, (1, 1), (1, 1));
    let r3 = relu(&bn(&c3, "bn3"));
    let c4 = conv2d_naive(&r3, w("conv4.w"), None, (1, 1), (1, 1));
    let r4 = relu(&bn(&c4, "bn4"));
    let res1 = add_naive(&r4, &p2);
    let c5 = conv2d_naive(&res1, w("conv5.w"), None, (1, 1), (1, 1));
    let r5 = relu(&bn(&c5, "bn5"));
    let c6 = conv2d_naive(&r5, w("conv6.w"), None, (1, 1), (1, 1));
    let r6 = relu(&bn(&c6, "bn6"));
    let res2 = add_naive(&r6, &res1);
    let p3 = maxpool_naive(&res2, (2, 2), (2, 2));
    let flat = p3.reshape(&[1, p3.len()]).unwrap();
    let expect = linear_naive(&flat, w("fc.w"), Some(w("fc.b")));

    assert_eq!(logits.shape(), expect.shape());
    let diff = max_abs_diff(&logits, &expect);
    assert!(diff <= 1e-4, "logits diverge from oracle by {diff}");
}

#[test]
fn embeddings_equal_run_taps_elementwise() {
    let g = load_fixture();
    let mut rng = seeded(61);
    let data = rand_tensor(&mut rng, &[3, 3, 32, 32]);
    let batch = Batch {
        index: 0,
        start: 0,
        data: data.clone(),
    };
    let embs = extract_embeddings(&g, "relu2", &[batch.clone()]).unwrap();
    let (_, taps) = g.run(&data, &["relu2"]).unwrap();
    let tap = &taps["relu2"];
    let (n, c, h, w) = tap.dim4().unwrap();
    assert_eq!(embs.len(), n);
    let flat = tap.as_f32().unwrap();
    for (s, e) in embs.iter().enumerate() {
        assert_eq!(e.data.shape(), &[c, h * w]);
        assert_eq!(
            e.data.as_f32().unwrap(),
            &flat[s * c * h * w..(s + 1) * c * h * w]
        );
    }

    // Tapping the input yields the raw image as a 3 x 1024 embedding.
    let embs = extract_embeddings(&g, "in", &[batch]).unwrap();
    assert_eq!(embs[0].data.shape(), &[3, 1024]);
}

#[test]
fn fixture_has_expected_structure() {
    let g = load_fixture();
    let convs = g
        .nodes()
        .iter()
        .filter(|n| matches!(n.op, OpKind::Conv2D { .. }))
        .count();
    let bns = g
        .nodes()
        .iter()
        .filter(|n| matches!(n.op, OpKind::BatchNorm2D { .. }))
        .count();
    assert_eq!(convs, 6);
    assert_eq!(bns, 6);
    assert!(g.node("relu2").is_some(), "gram tap exists");
    assert!(g.node("flat").is_some(), "feature tap exists");
}
