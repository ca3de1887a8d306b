use acan::data::{generate_dataset, SynthConfig, SynthDataset, VideoSet};
use acan::encoder::EncoderConfig;
use acan::heads::HeadParams;
use acan::losses::LossWeights;
use acan::model::{ModelConfig, ModelParams};
use acan::tensor::Tensor;
use acan::trainer::{
    compute_gradients, evaluate, run_ablation, train, train_from, warm_start, TrainConfig,
    TrainData, Variant,
};

fn small_synth() -> SynthConfig {
    SynthConfig {
        num_classes: 3,
        train_per_class: 6,
        val_per_class: 4,
        shape: [3, 4, 16, 16],
        ..SynthConfig::default()
    }
}

fn small_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        model: ModelConfig {
            encoder: EncoderConfig {
                input: [3, 4, 16, 16],
                channels: vec![4, 6, 8],
                ..EncoderConfig::default()
            },
            num_classes: 3,
            corr_latent: None,
            disc_hidden: 8,
            input_norm: None,
        },
        warmup_epochs: 1,
        epochs: 2,
        batch_size: 4,
        lr_drop_epochs: vec![1],
        seed: 9,
        ..TrainConfig::default()
    }
}

fn dataset() -> SynthDataset {
    generate_dataset(&small_synth(), 4).unwrap()
}

fn data_of(d: &SynthDataset) -> TrainData<'_> {
    TrainData {
        source: &d.source_train,
        target: &d.target_train,
        target_val: &d.target_val,
    }
}

fn zeroed(w: LossWeights) -> LossWeights {
    LossWeights {
        lambda_v: 0.0,
        lambda_r: 0.0,
        lambda_d: 0.0,
        lambda_dist: 0.0,
        ..w
    }
}

#[test]
fn target_batch_is_inert_when_weights_are_zero() {
    let d = dataset();
    let mut cfg = small_config(Variant::Acan);
    cfg.weights = zeroed(cfg.weights);
    let params = ModelParams::init(cfg.model.clone(), 1).unwrap();
    let idx = [0, 1, 2, 3];
    let zeros = VideoSet::new(
        d.target_train
            .videos
            .iter()
            .map(|v| Tensor::zeros(v.dims()))
            .collect(),
        d.target_train.labels.clone(),
        3,
    )
    .unwrap();
    let (a, _) = compute_gradients(
        &cfg,
        &params,
        &d.source_train,
        &idx,
        Some((&d.target_train, &idx)),
        false,
    )
    .unwrap();
    let (b, _) = compute_gradients(
        &cfg,
        &params,
        &d.source_train,
        &idx,
        Some((&zeros, &idx)),
        false,
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_weights_reproduce_source_only_training() {
    let d = dataset();
    let reference = train(&small_config(Variant::SourceOnly), data_of(&d)).unwrap();
    for v in [
        Variant::Acan,
        Variant::Dann,
        Variant::AcanL2Norm,
        Variant::MmdBaseline,
    ] {
        let mut cfg = small_config(v);
        cfg.weights = zeroed(cfg.weights);
        let out = train(&cfg, data_of(&d)).unwrap();
        for (x, y) in reference.params.tensors().iter().zip(out.params.tensors()) {
            let worst = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 1e-12, "{v}: {worst}");
        }
        assert_eq!(
            out.summary.final_target_top1, reference.summary.final_target_top1,
            "{v}"
        );
        let ly =
            |o: &acan::trainer::TrainOutcome| o.metrics.iter().map(|m| m.l_y).collect::<Vec<_>>();
        assert_eq!(ly(&out), ly(&reference), "{v}");
    }
}

#[test]
fn same_seed_same_metrics_stream() {
    let d = dataset();
    let cfg = small_config(Variant::Acan);
    let a = train(&cfg, data_of(&d)).unwrap();
    let b = train(&cfg, data_of(&d)).unwrap();
    assert_eq!(a.metrics_jsonl().unwrap(), b.metrics_jsonl().unwrap());
    assert_eq!(a.params, b.params);
    let other = train(&TrainConfig { seed: 10, ..cfg }, data_of(&d)).unwrap();
    assert_ne!(a.metrics_jsonl().unwrap(), other.metrics_jsonl().unwrap());
}

#[test]
fn metrics_cover_both_stages_with_the_variant_terms() {
    let d = dataset();
    let out = train(&small_config(Variant::Acan), data_of(&d)).unwrap();
    assert_eq!(out.metrics.len(), 3);
    let last = out.metrics.last().unwrap();
    assert!(
        last.l_vd.is_some() && last.l_cd.is_some() && last.d_m.is_some() && last.l_vs.is_some()
    );
    assert!(out
        .metrics
        .iter()
        .all(|m| (0.0..=1.0).contains(&m.target_val_top1)));
    assert!(out
        .metrics
        .iter()
        .all(|m| (0.0..=1.0).contains(&m.source_train_acc)));
    assert_eq!(
        out.metrics[2].learning_rate,
        out.metrics[1].learning_rate / 10.0
    );

    let so = train(&small_config(Variant::SourceOnly), data_of(&d)).unwrap();
    let last = so.metrics.last().unwrap();
    assert!(last.l_vd.is_none() && last.l_cd.is_none() && last.d_m.is_none());
}

#[test]
fn warm_start_is_shared_between_variants() {
    let d = dataset();
    let cfg = small_config(Variant::Dann);
    let warm = warm_start(&cfg, data_of(&d)).unwrap();
    let via_warm = train_from(&cfg, data_of(&d), &warm, |_| {}).unwrap();
    let direct = train(&cfg, data_of(&d)).unwrap();
    assert_eq!(via_warm.params, direct.params);
    let wrong = TrainConfig { seed: 1, ..cfg };
    assert!(train_from(&wrong, data_of(&d), &warm, |_| {}).is_err());
}

#[test]
fn evaluate_ignores_order() {
    let d = dataset();
    let out = train(&small_config(Variant::SourceOnly), data_of(&d)).unwrap();
    let n = d.target_val.len();
    let reversed: Vec<usize> = (0..n).rev().collect();
    let shuffled: Vec<usize> = (0..n).map(|i| (i * 5 + 2) % n).collect();
    let base = evaluate(&out.params, &d.target_val).unwrap();
    for order in [reversed, shuffled] {
        assert_eq!(
            evaluate(&out.params, &d.target_val.permuted(&order).unwrap()).unwrap(),
            base
        );
    }
}

#[test]
fn zero_classifier_picks_class_zero() {
    let d = dataset();
    let cfg = small_config(Variant::SourceOnly);
    let mut params = ModelParams::init(cfg.model.clone(), 0).unwrap();
    let latent = cfg.model.latent().unwrap();
    params.heads = HeadParams::zeros(
        cfg.model.encoder.feature_width(),
        latent,
        3,
        cfg.model.disc_hidden,
    );
    let freq0 =
        d.target_val.labels.iter().filter(|&&l| l == 0).count() as f64 / d.target_val.len() as f64;
    assert_eq!(evaluate(&params, &d.target_val).unwrap(), freq0);
}

#[test]
fn bad_configs_are_rejected() {
    let d = dataset();
    for cfg in [
        TrainConfig {
            epochs: 0,
            ..small_config(Variant::Acan)
        },
        TrainConfig {
            batch_size: 1,
            ..small_config(Variant::Acan)
        },
        TrainConfig {
            warmup_batch_size: 1,
            ..small_config(Variant::Acan)
        },
        TrainConfig {
            learning_rate: 0.0,
            ..small_config(Variant::Acan)
        },
        TrainConfig {
            grl_lambda: -1.0,
            ..small_config(Variant::Acan)
        },
    ] {
        let e = train(&cfg, data_of(&d)).unwrap_err();
        assert!(e.is_usage(), "{e}");
    }
    let wrong_shape = TrainConfig {
        model: ModelConfig::default(),
        ..small_config(Variant::Acan)
    };
    assert!(train(&wrong_shape, data_of(&d)).is_err());
}

#[test]
fn ablation_report_averages_per_seed_finals() {
    let d = dataset();
    let base = small_config(Variant::Acan);
    let report = run_ablation(&base, &[Variant::SourceOnly], &[3], data_of(&d)).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert!(report.pairwise.is_empty());

    let variants = [Variant::SourceOnly, Variant::PcdOnly];
    let report = run_ablation(&base, &variants, &[3, 4], data_of(&d)).unwrap();
    for v in variants {
        let finals: Vec<f64> = [3, 4]
            .iter()
            .map(|&s| {
                train(
                    &TrainConfig {
                        variant: v,
                        seed: s,
                        ..base.clone()
                    },
                    data_of(&d),
                )
                .unwrap()
                .summary
                .final_target_top1
            })
            .collect();
        let row = report.row(v).unwrap();
        assert_eq!(row.finals, finals);
        assert!((row.mean - (finals[0] + finals[1]) / 2.0).abs() <= 1e-12);
    }
    let p = report.pair(Variant::SourceOnly, Variant::PcdOnly).unwrap();
    assert_eq!(p.a_wins + p.b_wins + p.ties, 2);
}

#[test]
fn video_discriminator_does_not_win_outright() {
    let d = dataset();
    let out = train(
        &TrainConfig {
            epochs: 4,
            ..small_config(Variant::Dann)
        },
        data_of(&d),
    )
    .unwrap();
    let l_vd = out.metrics.last().unwrap().l_vd.unwrap();
    assert!(l_vd > 0.1, "{l_vd}");
}
