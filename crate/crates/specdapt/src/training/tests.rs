use super::*;
use crate::metrics::{accuracy, PredictionSet};
use crate::spectra::scenario::{build_scenario, tests::tiny_config};
use crate::spectra::types::{DomainTag, EnergyGrid, Spectrum, SplitTag};

fn base_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 8,
        weight_decay: 0.0,
        dropout: Some(0.0),
        max_epochs: 50,
        patience: 50,
        freeze: Freeze::None,
        seed,
    }
}

/// Two classes with disjoint support: class 0 lives in the low bins,
/// class 1 in the high bins.
fn separable_dataset(n_per_class: usize, seed: u64) -> LabeledDataset {
    let grid = EnergyGrid { n_bins: 8, e_min: 0.0, e_max: 100.0 };
    let mut rng = substream(seed, "separable", 0);
    let mut spectra = Vec::new();
    let mut labels = Vec::new();
    for i in 0..2 * n_per_class {
        let class = i % 2;
        let mut counts = vec![0.0; 8];
        for (b, c) in counts.iter_mut().enumerate() {
            let hot = if class == 0 { b < 4 } else { b >= 4 };
            *c = if hot { 40.0 + (rng.random::<f64>() * 20.0).round() } else { (rng.random::<f64>() * 4.0).round() };
        }
        spectra.push(Spectrum { counts, live_time: 1.0, grid });
        labels.extend(if class == 0 { [1.0, 0.0] } else { [0.0, 1.0] });
    }
    LabeledDataset {
        spectra,
        labels,
        classes: vec!["low".into(), "high".into()],
        domain_tag: DomainTag::Source,
        split_tag: SplitTag::Train,
    }
}

fn mlp_for(ds: &LabeledDataset, seed: u64) -> ModelBundle {
    let spec = ArchSpec::Mlp {
        n_bins: ds.spectra[0].counts.len(),
        n_classes: ds.n_classes(),
        hidden: vec![8],
        dropout: 0.0,
    };
    let mut rng = substream(seed, "train-test-init", 0);
    build(&spec, &mut rng).unwrap()
}

fn params_equal(a: &ModelBundle, b: &ModelBundle) -> bool {
    (0..a.params.len()).all(|i| {
        let (_, ta, _) = a.params.at(i);
        let (_, tb, _) = b.params.at(i);
        ta.values().iter().zip(tb.values()).all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

#[test]
fn adamw_matches_hand_computed_steps() {
    let mut params = ParamStore::new();
    params.insert("w", TensorF::scalar(1.0)).unwrap();
    let mut opt = AdamW::new(0.1, 0.0, &params);
    // constant gradient 0.5: bias correction makes both steps identical
    let mut g = crate::autodiff::graph::Graph::eval();
    let w = g.leaf(TensorF::scalar(1.0), true).unwrap();
    let half = g.constant(TensorF::scalar(0.5)).unwrap();
    let loss = g.mul(w, half).unwrap();
    let grads = g.backward(loss).unwrap();
    opt.step(&mut params, &grads, &[w]);
    let expected1 = 1.0 - 0.1 * 0.5 / (0.5 + ADAM_EPS);
    assert!((params.get("w").unwrap().item() - expected1).abs() < 1e-15);
    opt.step(&mut params, &grads, &[w]);
    let expected2 = expected1 - 0.1 * 0.5 / (0.5 + ADAM_EPS);
    assert!((params.get("w").unwrap().item() - expected2).abs() < 1e-12);
}

#[test]
fn adamw_weight_decay_is_decoupled() {
    let mut params = ParamStore::new();
    params.insert("w", TensorF::scalar(1.0)).unwrap();
    let mut opt = AdamW::new(0.1, 0.5, &params);
    // zero gradient leaves only the decay term
    let mut g = crate::autodiff::graph::Graph::eval();
    let w = g.leaf(TensorF::scalar(1.0), true).unwrap();
    let zero = g.constant(TensorF::scalar(0.0)).unwrap();
    let loss = g.mul(w, zero).unwrap();
    let grads = g.backward(loss).unwrap();
    opt.step(&mut params, &grads, &[w]);
    assert!((params.get("w").unwrap().item() - 0.95).abs() < 1e-15);
    opt.step(&mut params, &grads, &[w]);
    assert!((params.get("w").unwrap().item() - 0.9025).abs() < 1e-15);
}

#[test]
fn separable_toy_reaches_full_training_accuracy() {
    let train_set = separable_dataset(20, 1);
    let val_set = separable_dataset(8, 2);

    // separability oracle: a fixed linear rule on the zscored inputs
    // already classifies every sample
    let x = zscored_inputs(&train_set);
    for (i, row) in x.values().chunks_exact(8).enumerate() {
        let score: f64 = row[..4].iter().sum::<f64>() - row[4..].iter().sum::<f64>();
        let predicted = if score > 0.0 { 0 } else { 1 };
        assert_eq!(predicted, i % 2, "oracle rule must separate the toy data");
    }

    let model = mlp_for(&train_set, 3);
    let cfg = TrainConfig { max_epochs: 200, patience: 200, ..base_cfg(4) };
    let (trained, history) = train(&model, &train_set, &val_set, &cfg).unwrap();
    assert!(!history.is_empty());
    let probs = trained.predict_proba(&x).unwrap();
    let preds = PredictionSet::from_logits(
        trained.predict_logits(&x).unwrap(),
        labels_tensor(&train_set),
    )
    .unwrap();
    assert_eq!(probs.shape()[0], train_set.n());
    assert_eq!(accuracy(&preds).unwrap(), 1.0);
}

#[test]
fn same_seed_reproduces_parameters_bitwise() {
    let train_set = separable_dataset(10, 5);
    let val_set = separable_dataset(4, 6);
    let model = mlp_for(&train_set, 7);
    let cfg = TrainConfig { max_epochs: 5, patience: 5, dropout: Some(0.2), ..base_cfg(8) };
    let (a, ha) = train(&model, &train_set, &val_set, &cfg).unwrap();
    let (b, hb) = train(&model, &train_set, &val_set, &cfg).unwrap();
    assert_eq!(ha, hb);
    assert!(params_equal(&a, &b));
    let other = TrainConfig { seed: 9, ..cfg };
    let (c, _) = train(&model, &train_set, &val_set, &other).unwrap();
    assert!(!params_equal(&a, &c));
}

#[test]
fn patience_zero_stops_after_first_epoch() {
    let train_set = separable_dataset(10, 10);
    let val_set = separable_dataset(4, 11);
    let model = mlp_for(&train_set, 12);
    let zero = TrainConfig { max_epochs: 50, patience: 0, ..base_cfg(13) };
    let (stopped, history) = train(&model, &train_set, &val_set, &zero).unwrap();
    assert_eq!(history.len(), 1);
    let one_epoch = TrainConfig { max_epochs: 1, patience: 5, ..base_cfg(13) };
    let (single, _) = train(&model, &train_set, &val_set, &one_epoch).unwrap();
    assert!(params_equal(&stopped, &single));
}

#[test]
fn returned_checkpoint_hits_the_validation_minimum() {
    let train_set = separable_dataset(10, 14);
    let val_set = separable_dataset(4, 15);
    let model = mlp_for(&train_set, 16);
    let cfg = TrainConfig { max_epochs: 12, patience: 12, learning_rate: 5e-2, ..base_cfg(17) };
    let (trained, history) = train(&model, &train_set, &val_set, &cfg).unwrap();
    let best = history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    let returned = dataset_loss(&trained, &val_set).unwrap();
    assert!((returned - best).abs() < 1e-12, "{returned} vs history min {best}");
}

#[test]
fn finetune_freezing_masks_updates() {
    let train_set = separable_dataset(10, 18);
    let val_set = separable_dataset(4, 19);
    let pretrained = mlp_for(&train_set, 20);
    let layer_count = pretrained.layers.len();

    let tensors_equal = |a: &ModelBundle, b: &ModelBundle, name: &str| {
        a.params
            .get(name)
            .unwrap()
            .values()
            .iter()
            .zip(b.params.get(name).unwrap().values())
            .all(|(x, y)| x.to_bits() == y.to_bits())
    };

    let run = |freeze: Freeze| {
        let cfg = TrainConfig { max_epochs: 3, patience: 3, freeze, ..base_cfg(21) };
        finetune(&pretrained, &train_set, &val_set, &cfg).unwrap().0
    };

    let last1 = run(Freeze::Last { k: 1 });
    assert!(tensors_equal(&pretrained, &last1, "out.w"));
    assert!(tensors_equal(&pretrained, &last1, "out.b"));
    assert!(!tensors_equal(&pretrained, &last1, "dense1.w"));

    let first1 = run(Freeze::First { k: 1 });
    assert!(tensors_equal(&pretrained, &first1, "dense1.w"));
    assert!(!tensors_equal(&pretrained, &first1, "out.w"));

    let all = run(Freeze::Last { k: layer_count });
    assert!(params_equal(&pretrained, &all));
    // the returned model is usable for later full training
    assert!((0..all.params.len()).all(|i| all.params.is_trainable(i)));

    let zero_lr = TrainConfig {
        learning_rate: 1e-300,
        max_epochs: 2,
        patience: 2,
        ..base_cfg(22)
    };
    let (unchanged, _) = finetune(&pretrained, &train_set, &val_set, &zero_lr).unwrap();
    for i in 0..unchanged.params.len() {
        let (_, t, _) = unchanged.params.at(i);
        let (_, p, _) = pretrained.params.at(i);
        for (x, y) in t.values().iter().zip(p.values()) {
            assert!((x - y).abs() < 1e-250);
        }
    }
}

#[test]
fn freeze_beyond_layer_count_is_rejected() {
    let train_set = separable_dataset(4, 23);
    let val_set = separable_dataset(2, 24);
    let model = mlp_for(&train_set, 25);
    let n = model.layers.len();
    let cfg = TrainConfig { freeze: Freeze::Last { k: n + 1 }, ..base_cfg(26) };
    assert!(matches!(
        finetune(&model, &train_set, &val_set, &cfg),
        Err(Error::Validation(_))
    ));
}

#[test]
fn plain_train_rejects_freeze_directives() {
    let train_set = separable_dataset(4, 27);
    let val_set = separable_dataset(2, 28);
    let model = mlp_for(&train_set, 29);
    let cfg = TrainConfig { freeze: Freeze::Last { k: 1 }, ..base_cfg(30) };
    assert!(matches!(train(&model, &train_set, &val_set, &cfg), Err(Error::Validation(_))));
}

#[test]
fn empty_training_set_is_rejected() {
    let val_set = separable_dataset(2, 31);
    let mut empty = separable_dataset(1, 32);
    empty.spectra.clear();
    empty.labels.clear();
    let model = mlp_for(&val_set, 33);
    assert!(matches!(
        train(&model, &empty, &val_set, &base_cfg(34)),
        Err(Error::Validation(_))
    ));
}

#[test]
fn divergent_run_aborts_with_nonfinite_error() {
    let train_set = separable_dataset(6, 35);
    let val_set = separable_dataset(2, 36);
    let model = mlp_for(&train_set, 37);
    let cfg = TrainConfig {
        learning_rate: 1e6,
        weight_decay: 1e6,
        max_epochs: 40,
        patience: 40,
        ..base_cfg(38)
    };
    match train(&model, &train_set, &val_set, &cfg) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("epoch")),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn paired_trials_share_subsets_and_replicate_source_metrics() {
    let scenario = build_scenario(&tiny_config()).unwrap();
    let arch = ArchSpec::Mlp { n_bins: 256, n_classes: 8, hidden: vec![16], dropout: 0.0 };
    let quick = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 16,
        weight_decay: 0.0,
        dropout: Some(0.0),
        max_epochs: 2,
        patience: 2,
        freeze: Freeze::None,
        seed: 0,
    };
    let plan = TrialPlan {
        arch,
        sizes: vec![4, 8],
        n_trials: 2,
        pretrain: quick.clone(),
        target: quick.clone(),
        finetune: quick,
        knn_k: 3,
    };
    let records = run_paired_trials(&scenario, &plan, 99, "cfg-hash").unwrap();
    assert_eq!(records.len(), 3 * 2 * 2);
    for r in &records {
        assert_eq!(r.config_hash, "cfg-hash");
        assert_eq!(r.master_seed, 99);
        assert_eq!(r.n_test, scenario.target.test.n());
    }

    for trial in 0..2 {
        for &size in &[4usize, 8] {
            let group: Vec<&TrialRecord> = records
                .iter()
                .filter(|r| r.trial == trial && r.size == size)
                .collect();
            assert_eq!(group.len(), 3);
            let fp = &group[0].subset_fingerprint;
            assert!(group.iter().all(|r| r.subset_fingerprint == *fp));
            assert!(group.iter().all(|r| r.seed == group[0].seed));
            let protocols: Vec<Protocol> = group.iter().map(|r| r.protocol).collect();
            assert!(protocols.contains(&Protocol::SourceOnly));
            assert!(protocols.contains(&Protocol::TargetOnly));
            assert!(protocols.contains(&Protocol::DomainAdapted));
        }
        // source-only never sees the subset, so its metrics repeat across sizes
        let source: Vec<&TrialRecord> = records
            .iter()
            .filter(|r| r.trial == trial && r.protocol == Protocol::SourceOnly)
            .collect();
        assert_eq!(source.len(), 2);
        assert_eq!(source[0].metrics, source[1].metrics);
        // different sizes draw different subsets
        assert_ne!(source[0].subset_fingerprint, source[1].subset_fingerprint);
    }
    // trials draw different subsets of the same size
    let t0: Vec<&TrialRecord> =
        records.iter().filter(|r| r.trial == 0 && r.size == 4).collect();
    let t1: Vec<&TrialRecord> =
        records.iter().filter(|r| r.trial == 1 && r.size == 4).collect();
    assert_ne!(t0[0].subset_fingerprint, t1[0].subset_fingerprint);
}

#[test]
fn paired_trials_reject_oversized_subsets() {
    let scenario = build_scenario(&tiny_config()).unwrap();
    let arch = ArchSpec::Mlp { n_bins: 256, n_classes: 8, hidden: vec![16], dropout: 0.0 };
    let plan = TrialPlan {
        arch,
        sizes: vec![scenario.target.train.n() + 1],
        n_trials: 1,
        pretrain: base_cfg(0),
        target: base_cfg(0),
        finetune: base_cfg(0),
        knn_k: 3,
    };
    assert!(matches!(run_paired_trials(&scenario, &plan, 1, "h"), Err(Error::Validation(_))));
}

#[test]
fn trial_records_roundtrip_as_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trials.jsonl");
    let record = TrialRecord {
        protocol: Protocol::DomainAdapted,
        arch: "mlp".into(),
        size: 64,
        trial: 3,
        seed: 11,
        subset_fingerprint: "abc123".into(),
        n_test: 16,
        config_hash: "deadbeef".into(),
        master_seed: 99,
        metrics: crate::metrics::DiagnosticsReport {
            acc: 0.9,
            nll: 0.3,
            brier: 0.1,
            ece: 0.05,
            margin_mean: 4.0,
            margin_p10: -1.0,
            entropy_mean: 0.2,
            jacobian_norm_mean: 0.7,
            knn_tv_hard: 0.1,
            knn_prob_l2: 0.2,
            knn_conf_absdiff: 0.3,
            knn_margin_absdiff: 0.4,
        },
    };
    append_records(&path, &[record.clone()]).unwrap();
    append_records(&path, &[record.clone()]).unwrap();
    let back = read_records(&path).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0], record);

    std::fs::write(&path, "{not json}\n").unwrap();
    assert!(matches!(read_records(&path), Err(Error::CorruptFile(_))));
}

#[test]
fn search_samples_stay_in_their_ranges() {
    let space = SearchSpace::pretraining();
    for i in 0..100 {
        let mut rng = substream(40, "search-range", i);
        let cfg = space.sample(&base_cfg(0), &mut rng);
        assert!((1e-6..=1e-3).contains(&cfg.learning_rate));
        assert!((1e-7..=1e-1).contains(&cfg.weight_decay));
        let d = cfg.dropout.unwrap();
        assert!((0.0..=0.4).contains(&d));
        assert!(space.batch_sizes.contains(&cfg.batch_size));
        assert_eq!(cfg.freeze, Freeze::None);
    }
}

#[test]
fn finetuning_space_spans_none_to_all_layers() {
    let space = SearchSpace::finetuning(3);
    assert!(space.freeze_options.contains(&Freeze::None));
    assert!(space.freeze_options.contains(&Freeze::Last { k: 3 }));
    assert!(space.freeze_options.contains(&Freeze::First { k: 2 }));
    assert!(!space.freeze_options.contains(&Freeze::First { k: 3 }));
}

#[test]
fn random_search_returns_the_argmin() {
    let space = SearchSpace::pretraining();
    let (best, loss, trials) =
        random_search(&space, &base_cfg(0), 6, 41, |cfg| Ok(cfg.learning_rate)).unwrap();
    assert_eq!(trials.len(), 6);
    let min = trials
        .iter()
        .filter_map(|t| t.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(loss, min);
    assert_eq!(best.learning_rate, min);
}

#[test]
fn random_search_single_budget_returns_that_sample() {
    let space = SearchSpace::pretraining();
    let (best, loss, trials) =
        random_search(&space, &base_cfg(0), 1, 42, |cfg| Ok(cfg.weight_decay)).unwrap();
    assert_eq!(trials.len(), 1);
    assert_eq!(best, trials[0].config);
    assert_eq!(loss, trials[0].config.weight_decay);
}

#[test]
fn random_search_ties_keep_the_earliest_trial() {
    let space = SearchSpace::pretraining();
    let (best, _, trials) =
        random_search(&space, &base_cfg(0), 4, 43, |_| Ok(1.0)).unwrap();
    assert_eq!(best, trials[0].config);
}

#[test]
fn random_search_with_no_finite_trial_fails() {
    let space = SearchSpace::pretraining();
    let all_nan = random_search(&space, &base_cfg(0), 3, 44, |_| Ok(f64::NAN));
    assert!(matches!(all_nan, Err(Error::DegenerateStats(_))));
    let all_diverge = random_search(&space, &base_cfg(0), 3, 45, |_| {
        Err(Error::non_finite("boom"))
    });
    assert!(matches!(all_diverge, Err(Error::DegenerateStats(_))));
    let zero_budget = random_search(&space, &base_cfg(0), 0, 46, |_| Ok(0.0));
    assert!(matches!(zero_budget, Err(Error::Validation(_))));
}
