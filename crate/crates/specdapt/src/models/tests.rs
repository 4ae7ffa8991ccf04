use super::*;
use crate::rng::substream;
use crate::spectra::types::{DomainTag, EnergyGrid, Spectrum, SplitTag};
use rand_distr::{Distribution, Normal};

fn reduced_mlp() -> ArchSpec {
    ArchSpec::Mlp { n_bins: 64, n_classes: 3, hidden: vec![8], dropout: 0.0 }
}

fn reduced_cnn() -> ArchSpec {
    ArchSpec::Cnn { n_bins: 64, n_classes: 3, filters: 2, kernel: 3, hidden: vec![8], dropout: 0.0 }
}

fn reduced_tbnn_li() -> ArchSpec {
    ArchSpec::TbnnLi { n_bins: 64, n_classes: 3, blocks: 1, heads: 2, ff_dim: 16, dropout: 0.0 }
}

fn reduced_tbnn_ours(embedding: EmbeddingMethod, pos_encoding: PosEncoding) -> ArchSpec {
    ArchSpec::TbnnOurs {
        n_bins: 64,
        n_classes: 3,
        patch: 8,
        embed_filters: 2,
        embed_dim: 16,
        blocks: 1,
        heads: 2,
        ff_dim: 16,
        embedding,
        pos_encoding,
        dropout: 0.0,
    }
}

fn random_batch(spec: &ArchSpec, batch: usize, seed: u64) -> TensorF {
    let mut rng = substream(seed, "models-test-input", 0);
    let dist = Normal::new(0.0, 1.0).unwrap();
    let n = batch * spec.n_bins();
    TensorF::new(vec![batch, spec.n_bins()], (0..n).map(|_| dist.sample(&mut rng)).collect())
        .unwrap()
}

#[test]
fn mlp_parameter_count_matches_hand_total() {
    let spec = ArchSpec::paper_mlp(1024, 8);
    let mut rng = substream(70, "models-test", 0);
    let bundle = build(&spec, &mut rng).unwrap();
    // 1024*4096 + 4096, 4096*2048 + 2048, 2048*8 + 8
    assert_eq!(bundle.n_params(), 12_605_448);
    assert_eq!(bundle.layer_names(), vec!["dense1", "dense2", "out"]);
}

#[test]
fn paper_presets_validate() {
    for spec in [
        ArchSpec::paper_mlp(1024, 8),
        ArchSpec::paper_cnn(1024, 8),
        ArchSpec::paper_tbnn_li(1024, 8),
        ArchSpec::paper_tbnn_ours(1024, 8),
    ] {
        spec.validate().unwrap();
    }
}

#[test]
fn tbnn_ours_token_geometry() {
    let spec = ArchSpec::paper_tbnn_ours(1024, 8);
    let mut rng = substream(71, "models-test", 0);
    let bundle = build(&spec, &mut rng).unwrap();
    // 1024 / 64 = 16 patches plus the CLS token
    assert_eq!(bundle.params.get("embed.pos").unwrap().shape(), &[17, 256]);
    assert_eq!(bundle.params.get("embed.cls").unwrap().shape(), &[256]);
    // CNN embedding flattens 8 filters over a 64-bin patch
    assert_eq!(bundle.params.get("embed.proj.w").unwrap().shape(), &[512, 256]);
    assert_eq!(bundle.params.get("out.w").unwrap().shape(), &[256, 8]);
    assert_eq!(bundle.params.get("head.fc.w").unwrap().shape(), &[256, 256]);
}

#[test]
fn tbnn_li_token_geometry() {
    let spec = ArchSpec::paper_tbnn_li(1024, 8);
    let mut rng = substream(72, "models-test", 0);
    let bundle = build(&spec, &mut rng).unwrap();
    // 1024 bins reshape to 32 tokens of width 32
    assert_eq!(bundle.params.get("block1.attn.q.w").unwrap().shape(), &[32, 32]);
    assert_eq!(bundle.params.get("block5.ff1.w").unwrap().shape(), &[32, 1024]);
    assert_eq!(bundle.params.get("out.w").unwrap().shape(), &[1024, 8]);
}

#[test]
fn invalid_specs_rejected() {
    let bad = [
        ArchSpec::Mlp { n_bins: 0, n_classes: 3, hidden: vec![8], dropout: 0.0 },
        ArchSpec::Mlp { n_bins: 64, n_classes: 3, hidden: vec![], dropout: 0.0 },
        ArchSpec::Mlp { n_bins: 64, n_classes: 3, hidden: vec![8], dropout: 1.0 },
        ArchSpec::Cnn { n_bins: 8, n_classes: 3, filters: 2, kernel: 9, hidden: vec![4], dropout: 0.0 },
        ArchSpec::TbnnLi { n_bins: 60, n_classes: 3, blocks: 1, heads: 2, ff_dim: 8, dropout: 0.0 },
        ArchSpec::TbnnLi { n_bins: 64, n_classes: 3, blocks: 1, heads: 3, ff_dim: 8, dropout: 0.0 },
        ArchSpec::TbnnOurs {
            n_bins: 64,
            n_classes: 3,
            patch: 7,
            embed_filters: 2,
            embed_dim: 16,
            blocks: 1,
            heads: 2,
            ff_dim: 16,
            embedding: EmbeddingMethod::Cnn,
            pos_encoding: PosEncoding::Learnable,
            dropout: 0.0,
        },
        ArchSpec::TbnnOurs {
            n_bins: 64,
            n_classes: 3,
            patch: 8,
            embed_filters: 2,
            embed_dim: 15,
            blocks: 1,
            heads: 2,
            ff_dim: 16,
            embedding: EmbeddingMethod::Cnn,
            pos_encoding: PosEncoding::Learnable,
            dropout: 0.0,
        },
    ];
    for spec in bad {
        assert!(spec.validate().is_err(), "{spec:?} should not validate");
    }
}

#[test]
fn predict_proba_rows_on_simplex() {
    for (i, spec) in [
        reduced_mlp(),
        reduced_cnn(),
        reduced_tbnn_li(),
        reduced_tbnn_ours(EmbeddingMethod::Cnn, PosEncoding::Learnable),
    ]
    .iter()
    .enumerate()
    {
        let mut rng = substream(73, "models-test", i as u64);
        let bundle = build(spec, &mut rng).unwrap();
        let x = random_batch(spec, 5, 100 + i as u64);
        let probs = bundle.predict_proba(&x).unwrap();
        assert_eq!(probs.shape(), &[5, 3]);
        for row in probs.values().chunks_exact(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|p| p.is_finite() && *p > 0.0));
        }
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let spec = reduced_tbnn_ours(EmbeddingMethod::Cnn, PosEncoding::Learnable);
    let mut rng = substream(74, "models-test", 0);
    let bundle = build(&spec, &mut rng).unwrap();
    let x = random_batch(&spec, 4, 200);
    let a = bundle.predict_logits(&x).unwrap();
    let b = bundle.predict_logits(&x).unwrap();
    for (p, q) in a.values().iter().zip(b.values()) {
        assert_eq!(p.to_bits(), q.to_bits());
    }
}

#[test]
fn zeroed_output_layer_gives_uniform_probabilities() {
    let spec = reduced_cnn();
    let mut rng = substream(75, "models-test", 0);
    let mut bundle = build(&spec, &mut rng).unwrap();
    for name in ["out.w", "out.b"] {
        bundle.params.get_mut(name).unwrap().values_mut().fill(0.0);
    }
    let x = random_batch(&spec, 3, 300);
    let probs = bundle.predict_proba(&x).unwrap();
    for p in probs.values() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn batch_order_does_not_change_rows() {
    for (i, spec) in [reduced_mlp(), reduced_tbnn_li()].iter().enumerate() {
        let mut rng = substream(76, "models-test", i as u64);
        let bundle = build(spec, &mut rng).unwrap();
        let x = random_batch(spec, 3, 400 + i as u64);
        let n_bins = spec.n_bins();
        let rows: Vec<&[f64]> = x.values().chunks_exact(n_bins).collect();
        let permuted = TensorF::new(
            vec![3, n_bins],
            [rows[2], rows[0], rows[1]].concat(),
        )
        .unwrap();
        let straight = bundle.predict_logits(&x).unwrap();
        let shuffled = bundle.predict_logits(&permuted).unwrap();
        let m = spec.n_classes();
        for (orig, perm) in [(0, 1), (1, 2), (2, 0)] {
            for c in 0..m {
                let a = straight.values()[orig * m + c];
                let b = shuffled.values()[perm * m + c];
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.spdw");
    let spec = reduced_tbnn_ours(EmbeddingMethod::Cnn, PosEncoding::Learnable);
    let mut rng = substream(77, "models-test", 0);
    let bundle = build(&spec, &mut rng).unwrap();
    bundle.save(&path).unwrap();
    let restored = ModelBundle::load(&spec, &path).unwrap();
    let x = random_batch(&spec, 4, 500);
    let a = bundle.predict_logits(&x).unwrap();
    let b = restored.predict_logits(&x).unwrap();
    for (p, q) in a.values().iter().zip(b.values()) {
        assert_eq!(p.to_bits(), q.to_bits());
    }
}

#[test]
fn checkpoint_rejects_wrong_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.spdw");
    let mut rng = substream(78, "models-test", 0);
    let bundle = build(&reduced_mlp(), &mut rng).unwrap();
    bundle.save(&path).unwrap();
    let err = ModelBundle::load(&reduced_cnn(), &path).unwrap_err();
    assert!(matches!(err, Error::CorruptFile(_)));
}

#[test]
fn layer_order_is_stable_across_builds() {
    let spec = ArchSpec::paper_tbnn_ours(1024, 8);
    let mut r1 = substream(79, "models-test", 0);
    let mut r2 = substream(79, "models-test", 1);
    let a = build(&spec, &mut r1).unwrap();
    let b = build(&spec, &mut r2).unwrap();
    assert_eq!(a.layer_names(), b.layer_names());
    assert_eq!(a.layer_names().first(), Some(&"embed.conv"));
    assert_eq!(a.layer_names().last(), Some(&"out"));
    // every tensor in the store is owned by exactly one layer
    let owned: usize = a.layers.iter().map(|l| l.tensors.len()).sum();
    assert_eq!(owned, a.params.len());
}

#[test]
fn zscored_inputs_standardize_each_row() {
    let grid = EnergyGrid { n_bins: 4, e_min: 0.0, e_max: 100.0 };
    let ds = crate::spectra::types::LabeledDataset {
        spectra: vec![
            Spectrum { counts: vec![1.0, 2.0, 3.0, 4.0], live_time: 1.0, grid: grid.clone() },
            Spectrum { counts: vec![5.0, 5.0, 5.0, 5.0], live_time: 1.0, grid },
        ],
        labels: vec![1.0, 0.0, 0.0, 1.0],
        classes: vec!["a".into(), "b".into()],
        domain_tag: DomainTag::Source,
        split_tag: SplitTag::Train,
    };
    let x = zscored_inputs(&ds);
    assert_eq!(x.shape(), &[2, 4]);
    let row0 = &x.values()[..4];
    let mean: f64 = row0.iter().sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
    assert!(x.values()[4..].iter().all(|v| *v == 0.0));
    let y = labels_tensor(&ds);
    assert_eq!(y.shape(), &[2, 2]);
}

// Central-difference check of dLoss/dParam over every parameter of a
// reduced model, with a spot check of the input gradient.
fn model_fd_check(spec: ArchSpec, seed: u64) {
    let mut rng = substream(seed, "models-fd", 0);
    let mut bundle = build(&spec, &mut rng).unwrap();
    let batch = 2;
    let m = spec.n_classes();
    let x = random_batch(&spec, batch, seed);
    let mut label_values = vec![0.0; batch * m];
    label_values[0] = 1.0;
    label_values[m + 1] = 1.0;
    let labels = TensorF::new(vec![batch, m], label_values).unwrap();

    let loss_of = |b: &ModelBundle, input: &TensorF| -> f64 {
        let mut fwd = b.build_graph(input, GraphOpts::default()).unwrap();
        let loss = fwd.graph.cross_entropy_mean(fwd.logits, &labels).unwrap();
        fwd.graph.value(loss).item()
    };

    let mut fwd = bundle
        .build_graph(&x, GraphOpts { param_grads: true, input_grad: true, ..Default::default() })
        .unwrap();
    let loss = fwd.graph.cross_entropy_mean(fwd.logits, &labels).unwrap();
    let grads = fwd.graph.backward(loss).unwrap();

    let eps = 1e-4;
    for pi in 0..bundle.params.len() {
        let analytic = grads.wrt(fwd.param_nodes[pi]).unwrap().to_vec();
        let name = bundle.params.at(pi).0.to_string();
        for j in 0..analytic.len() {
            let orig = bundle.params.at(pi).1.values()[j];
            bundle.params.at_mut(pi).1.values_mut()[j] = orig + eps;
            let up = loss_of(&bundle, &x);
            bundle.params.at_mut(pi).1.values_mut()[j] = orig - eps;
            let down = loss_of(&bundle, &x);
            bundle.params.at_mut(pi).1.values_mut()[j] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = analytic[j];
            assert!(
                (a - fd).abs() < 1e-6 + 1e-4 * a.abs().max(fd.abs()),
                "{name}[{j}]: analytic {a} vs fd {fd}"
            );
        }
    }

    // input gradient on the first few coordinates
    let input_grad = grads.wrt(fwd.input).unwrap().to_vec();
    for j in 0..5 {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.values_mut()[j] += eps;
        minus.values_mut()[j] -= eps;
        let fd = (loss_of(&bundle, &plus) - loss_of(&bundle, &minus)) / (2.0 * eps);
        let a = input_grad[j];
        assert!(
            (a - fd).abs() < 1e-6 + 1e-4 * a.abs().max(fd.abs()),
            "input[{j}]: analytic {a} vs fd {fd}"
        );
    }
}

#[test]
fn gradcheck_mlp_end_to_end() {
    model_fd_check(reduced_mlp(), 81);
}

#[test]
fn gradcheck_cnn_end_to_end() {
    model_fd_check(reduced_cnn(), 82);
}

#[test]
fn gradcheck_tbnn_li_end_to_end() {
    model_fd_check(reduced_tbnn_li(), 83);
}

#[test]
fn gradcheck_tbnn_ours_end_to_end() {
    model_fd_check(reduced_tbnn_ours(EmbeddingMethod::Cnn, PosEncoding::Learnable), 84);
}

#[test]
fn gradcheck_tbnn_ours_alternate_embeddings() {
    model_fd_check(reduced_tbnn_ours(EmbeddingMethod::Linear, PosEncoding::Sinusoidal), 85);
    model_fd_check(reduced_tbnn_ours(EmbeddingMethod::Mlp, PosEncoding::Learnable), 86);
}

#[test]
fn arch_spec_serde_roundtrip() {
    for spec in [
        ArchSpec::paper_mlp(1024, 8),
        ArchSpec::paper_cnn(1024, 8),
        ArchSpec::paper_tbnn_li(1024, 8),
        ArchSpec::paper_tbnn_ours(1024, 8),
    ] {
        let json = serde_json::to_string(&spec).unwrap();
        let back: ArchSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
