use std::collections::BTreeSet;

use cf2net::checkpoint::{load_checkpoint, save_checkpoint, CheckpointInfo, Progress};
use cf2net::dataset::{generate_synthetic, make_folds, preprocess_sample, Sample};
use cf2net::model::{Cf2Net, ModelConfig};
use cf2net::nn::{OptimizerConfig, Tensor};
use cf2net::plane::Plane;
use cf2net::superpixel::SlicParams;
use cf2net::trainer::{
    config_diff, cross_validate, overfit_smoke_test, run_ablation, train_fold, AblationVariant,
    OverfitConfig, Predictor, TrainConfig,
};

fn samples(count: usize, size: usize, sp: Option<&SlicParams>) -> Vec<Sample> {
    let index = generate_synthetic(count, size, 11).unwrap();
    index
        .entries
        .iter()
        .map(|e| {
            let s = preprocess_sample(e.id.clone(), &e.load().unwrap(), size).unwrap();
            match sp {
                Some(p) => s.with_superpixels(p).unwrap(),
                None => s,
            }
        })
        .collect()
}

fn small_slic() -> SlicParams {
    SlicParams {
        k: 40,
        ..SlicParams::default()
    }
}

/// Two-fold run of a very small network.
fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        folds: 2,
        model: ModelConfig {
            em_channels: 4,
            use_superpixel: false,
            ..ModelConfig::desk(2, 32)
        },
        ..TrainConfig::default()
    }
}

#[test]
fn one_epoch_gives_one_record() {
    let data = samples(4, 32, None);
    let config = tiny_config(1);
    let split = make_folds(data.len(), 2, 0).unwrap();
    let out = train_fold(&config, 0, &split, &data, None).unwrap();
    assert_eq!(out.history.records.len(), 1);
    let r = &out.history.records[0];
    assert_eq!(r.epoch, 1);
    assert!(r.loss.is_finite() && r.val_dsc.is_some());
}

#[test]
fn held_out_images_never_reach_a_training_batch() {
    let data = samples(6, 32, None);
    let config = TrainConfig {
        augment_flip: true,
        ..tiny_config(2)
    };
    let split = make_folds(data.len(), 2, 0).unwrap();
    for fold in 0..2 {
        let out = train_fold(&config, fold, &split, &data, None).unwrap();
        let held: BTreeSet<_> = out.held_out_ids.iter().cloned().collect();
        assert!(out.trained_ids.is_disjoint(&held));
        assert_eq!(out.trained_ids.len() + held.len(), data.len());
    }
}

#[test]
fn training_loss_descends_on_a_small_set() {
    let data = samples(8, 64, None);
    let config = TrainConfig {
        epochs: 20,
        folds: 2,
        model: ModelConfig {
            use_superpixel: false,
            ..ModelConfig::desk(8, 64)
        },
        ..TrainConfig::default()
    };
    let split = make_folds(data.len(), 2, 0).unwrap();
    let out = train_fold(&config, 0, &split, &data, None).unwrap();
    let r = &out.history.records;
    assert_eq!(r.len(), 20);
    assert!(r[19].loss < r[0].loss, "{} !< {}", r[19].loss, r[0].loss);
}

#[test]
fn cross_validation_writes_reports_and_is_reproducible() {
    let data = samples(8, 32, None);
    let config = tiny_config(2);
    let dir = tempfile::tempdir().unwrap();
    let a = cross_validate(&config, &data, Some(dir.path())).unwrap();
    let b = cross_validate(&config, &data, None).unwrap();
    assert_eq!(a.report.per_fold.len(), 2);
    assert_eq!(a.report.summary, b.report.summary);
    for f in 0..2 {
        let fold = dir.path().join(format!("fold{f}"));
        for file in ["history.jsonl", "best.safetensors", "final.safetensors"] {
            assert!(fold.join(file).exists(), "{file}");
        }
        let lines = std::fs::read_to_string(fold.join("history.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 2);
    }
    assert!(dir.path().join("report.jsonl").exists());
    assert!(a.report.metadata.contains_key("best_epochs"));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let config = ModelConfig {
        em_channels: 4,
        ..ModelConfig::desk(2, 32)
    };
    let (net, store) = Cf2Net::build(&config, 3).unwrap();
    let input = Tensor::from_vec(
        [1, 2, 32, 32],
        (0..2048).map(|i| ((i * 37) % 255) as f32 / 255.0).collect(),
    );
    let before = net.predict(&store, input.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    let info = CheckpointInfo {
        model: config.clone(),
        superpixel: Some(small_slic()),
        optimizer: None,
        optimizer_steps: 0,
        progress: Progress::default(),
    };
    save_checkpoint(&path, &info, &store, None).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let after = ck.net.predict(&ck.store, input).unwrap();
    assert_eq!(before, after);
    assert_eq!(ck.info.superpixel, Some(small_slic()));
}

#[test]
fn variants_differ_only_in_their_toggles() {
    let base = TrainConfig::default();
    for a in AblationVariant::ALL {
        for b in AblationVariant::ALL {
            let diff = config_diff(&a.apply(&base), &b.apply(&base)).unwrap();
            assert_eq!(diff, a.toggle_diff(b), "{a} vs {b}");
        }
    }
}

#[test]
fn variant_settings_follow_the_stepwise_order() {
    use AblationVariant::*;
    let base = TrainConfig::default();
    let unet = Unet.apply(&base);
    assert!(unet.model.backbone_skips && !unet.model.use_fsp && !unet.loss.balanced);
    assert!(Unetw.apply(&base).loss.balanced);
    let c = Cf2c.apply(&base);
    assert!(c.model.use_fsp && !c.model.use_aspp && !c.model.use_ec && !c.model.backbone_skips);
    assert!(Cf2cAspp.apply(&base).model.use_aspp);
    assert!(Cf2cAsppEc.apply(&base).model.use_ec);
    assert!(Cf2netFull.apply(&base).model.use_superpixel);
    assert!("nonsense".parse::<AblationVariant>().is_err());
}

#[test]
fn ablation_tables_have_the_requested_rows() {
    use AblationVariant::*;
    let data = samples(4, 32, Some(&small_slic()));
    let base = TrainConfig {
        superpixel: small_slic(),
        ..tiny_config(1)
    };
    let dir = tempfile::tempdir().unwrap();
    let report = run_ablation(
        &base,
        &[Cf2c, Cf2cAspp, Cf2cAsppEc],
        &data,
        Some(dir.path()),
    )
    .unwrap();
    let table = report.to_table();
    assert!(table.contains("ASPP"));
    assert_eq!(table.matches('Δ').count(), 2);
    assert!(dir.path().join("ablation.txt").exists());
    assert!(dir.path().join("cf2c_aspp/report.jsonl").exists());

    let single = run_ablation(&base, &[Unet], &data, None).unwrap();
    assert_eq!(single.rows.len(), 1);
    assert!(run_ablation(&base, &[], &data, None).is_err());
}

#[test]
fn prediction_contract() {
    let config = ModelConfig {
        em_channels: 4,
        ..ModelConfig::desk(2, 32)
    };
    let (net, store) = Cf2Net::build(&config, 0).unwrap();
    let predictor = Predictor::new(net, store, Some(small_slic())).unwrap();
    let err = predictor
        .predict(&Plane::filled(40, 30, 0.3f32), false)
        .unwrap_err();
    assert!(err.to_string().contains("mismatch"), "{err}");

    let zero = predictor
        .predict(&Plane::filled(50, 50, 0.0f32), true)
        .unwrap();
    assert_eq!(zero.mask.dims(), (32, 32));
    assert!(zero.edge.is_some());
    assert_eq!(zero.overlay().dimensions(), (32, 32));
}

#[test]
fn overfit_check_fails_without_updates() {
    let config = OverfitConfig {
        model: ModelConfig {
            em_channels: 4,
            ..ModelConfig::desk(2, 32)
        },
        optimizer: OptimizerConfig::default().with_learning_rate(0.0),
        superpixel: small_slic(),
        max_steps: 5,
        ..OverfitConfig::default()
    };
    let report = overfit_smoke_test(&config).unwrap().report;
    assert!(!report.passed);
    assert!(report.all_finite);
    assert_eq!(report.steps, 5);
    assert_eq!(report.initial_loss, report.final_loss);
}

#[test]
fn plain_backbone_overfits() {
    let config = OverfitConfig {
        model: AblationVariant::Unet
            .apply(&TrainConfig::default())
            .model
            .clone(),
        ..OverfitConfig::default()
    };
    let config = OverfitConfig {
        model: ModelConfig {
            base_width: 8,
            size: 64,
            ..config.model
        },
        ..config
    };
    let report = overfit_smoke_test(&config).unwrap().report;
    assert!(
        report.passed,
        "{} → {}",
        report.initial_loss, report.final_loss
    );
}
