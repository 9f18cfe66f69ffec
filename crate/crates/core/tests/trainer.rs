use std::sync::OnceLock;

use ndarray::Array2;

use segcl::experiment::{generate_dataset, DataConfig, ExperimentConfig};
use segcl::losses::{ContrastiveKind, LossConfig};
use segcl::model::{ModelConfig, Network};
use segcl::nn::{Adam, ParamSet, Pass};
use segcl::phantom::{Corpus, DatasetSplit, Geometry, StratifyConfig, UpperBoundSplit};
use segcl::trainer::{
    contrastive_loss_grad, finetune, image_batch, labeled_batch, pretrain_contrastive, supervised_loss_grad, train,
    train_joint, train_supervised, Regime, RunOptions, TrainConfig, TrainData, TrainOutcome,
};

fn fixture() -> &'static (Corpus, DatasetSplit) {
    static DATA: OnceLock<(Corpus, DatasetSplit)> = OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = ExperimentConfig {
            seed: 3,
            output_dir: "unused".into(),
            data: DataConfig {
                geometry: Geometry {
                    depth: 6,
                    height: 16,
                    width: 16,
                },
                num_classes: 4,
                source_volumes: 8,
                target_volumes: 8,
                stratify: StratifyConfig {
                    source_train: 3,
                    source_val: 1,
                    source_test: 2,
                    source_unlabeled: 2,
                    target_test: 2,
                    upper_bound: Some(UpperBoundSplit { train: 2, val: 1 }),
                    labeled_slices_per_volume: 2,
                    test_slices_per_volume: Some(2),
                    ..StratifyConfig::default()
                },
                ..DataConfig::default()
            },
            model: ModelConfig::tiny(),
            train: TrainConfig::default(),
            ablation: Default::default(),
            grid: vec![],
        };
        generate_dataset(&cfg).unwrap()
    })
}

fn config(regime: Regime, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        regime,
        epochs,
        batch_labeled: 2,
        batch_pairs_per_domain: 2,
        seed,
        pretrain_steps: 3,
        ..TrainConfig::default()
    }
}

fn run(cfg: &TrainConfig) -> TrainOutcome {
    let (corpus, split) = fixture();
    train(
        &ModelConfig::tiny(),
        cfg,
        &TrainData::new(corpus, split),
        &RunOptions::default(),
    )
    .unwrap()
}

fn losses(out: &TrainOutcome, split: &str) -> Vec<f64> {
    out.log
        .iter()
        .filter(|l| l.split == split && l.metric == "loss")
        .map(|l| l.value)
        .collect()
}

fn max_abs_diff(a: &[(String, &[f32])], b: &[(String, &[f32])]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|((na, ta), (nb, tb))| {
            assert_eq!(na, nb);
            ta.iter().zip(tb.iter()).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f32::max)
}

/// One optimizer step on a 4-slice batch lowers the loss on that batch.
#[test]
fn supervised_step_descends_for_most_seeds() {
    let (corpus, split) = fixture();
    let samples: Vec<_> = split.labeled_train[..4]
        .iter()
        .map(|r| corpus.labeled_slice(r).unwrap())
        .collect();
    let (x, y) = labeled_batch::<f32>(&samples.iter().collect::<Vec<_>>()).unwrap();
    let eps = LossConfig::default().eps;
    let descending = (0..10)
        .filter(|&seed| {
            let mut net = Network::<f32>::build(&ModelConfig::tiny(), seed, false, false).unwrap();
            let mut grad = net.clone();
            grad.fill_zero();
            let before = supervised_loss_grad(&net.unet, &mut grad.unet, &x, &y, eps, 1.0, &mut Pass::Eval).unwrap();
            Adam::new(1e-3).step(net.tensors_mut(""), grad.tensors(""));
            let mut scratch = grad.clone();
            let after = supervised_loss_grad(&net.unet, &mut scratch.unet, &x, &y, eps, 1.0, &mut Pass::Eval).unwrap();
            after < before
        })
        .count();
    assert!(descending > 5, "{descending} of 10 seeds descended");
}

#[test]
fn epoch_losses_are_logged() {
    let out = run(&config(Regime::Baseline, 3, 0));
    let l = losses(&out, "train");
    assert_eq!(l.len(), 3);
    assert!(l.iter().all(|v| v.is_finite()));
}

#[test]
fn contrastive_steps_descend_on_a_fixed_batch() {
    let model = ModelConfig::tiny();
    let (corpus, _) = fixture();
    let images: Vec<Array2<f32>> = corpus.volumes.values().take(8).map(|(v, _)| v.slice(2)).collect();
    let refs: Vec<&Array2<f32>> = images.iter().collect();
    let shifted: Vec<Array2<f32>> = images
        .iter()
        .map(|im| im.mapv(|v| (v * 0.9 + 0.05).clamp(0.0, 1.0)))
        .collect();
    let xp = image_batch::<f32>(&refs);
    let xpp = image_batch::<f32>(&shifted.iter().collect::<Vec<_>>());
    for kind in [ContrastiveKind::Clr, ContrastiveKind::Siam] {
        let loss = LossConfig {
            contrastive_kind: kind,
            ..LossConfig::default()
        };
        let mut net = Network::<f32>::build(&model, 0, true, kind == ContrastiveKind::Siam).unwrap();
        let mut adam = Adam::new(1e-3);
        let mut values = Vec::new();
        for _ in 0..20 {
            let mut grad = net.clone();
            grad.fill_zero();
            values.push(contrastive_loss_grad(&net, &mut grad, &xp, &xpp, &loss, 1.0, &mut Pass::Eval).unwrap());
            adam.step(net.contrastive_tensors_mut(), grad.contrastive_tensors());
        }
        assert!(values[19] < values[0], "{kind:?}: {values:?}");
    }
}

#[test]
fn pretraining_logs_every_step() {
    let (corpus, split) = fixture();
    let cfg = TrainConfig {
        pretrain_steps: 7,
        ..config(Regime::PretrainFinetune, 1, 0)
    };
    let (_, log) = pretrain_contrastive(&ModelConfig::tiny(), &cfg, &TrainData::new(corpus, split)).unwrap();
    assert_eq!(log.len(), 7);
    assert!(log.iter().all(|l| l.split == "pretrain" && l.value.is_finite()));
}

#[test]
fn pretraining_leaves_decoder_alone() {
    let (corpus, split) = fixture();
    let model = ModelConfig::tiny();
    for kind in [ContrastiveKind::Clr, ContrastiveKind::Siam] {
        let mut cfg = config(Regime::PretrainFinetune, 1, 4);
        cfg.loss.contrastive_kind = kind;
        let (net, _) = pretrain_contrastive(&model, &cfg, &TrainData::new(corpus, split)).unwrap();
        let init = Network::<f32>::build(&model, 4, true, false).unwrap();
        assert_eq!(net.unet.decoder_tensors(), init.unet.decoder_tensors());
        assert_ne!(net.unet.encoder_tensors(), init.unet.encoder_tensors());
        assert_eq!(net.predictor.is_some(), kind == ContrastiveKind::Siam);
        assert!(net.head.is_some());
    }
}

#[test]
fn finetune_from_untrained_encoder_is_supervised_training() {
    let (corpus, split) = fixture();
    let model = ModelConfig::tiny();
    let cfg = config(Regime::Baseline, 2, 5);
    let random = Network::<f32>::build(&model, 5, false, false).unwrap();
    let data = TrainData::new(corpus, split);
    let a = finetune(&random, &model, &cfg, &data, Vec::new(), &RunOptions::default()).unwrap();
    let b = train_supervised(&model, &cfg, &TrainData::new(corpus, split), &RunOptions::default()).unwrap();
    assert_eq!(a.checkpoint.net.tensors(""), b.checkpoint.net.tensors(""));
    assert_eq!(a.log, b.log);
}

#[test]
fn training_is_deterministic() {
    let cfg = config(Regime::Joint, 2, 6);
    let a = run(&cfg);
    let b = run(&cfg);
    assert_eq!(a.checkpoint.net.tensors(""), b.checkpoint.net.tensors(""));
    assert_eq!(a.log, b.log);
}

#[test]
fn target_labels_are_read_only_by_upper_bound() {
    let (_, split) = fixture();
    for regime in [Regime::Baseline, Regime::Joint, Regime::PretrainFinetune] {
        let a = run(&config(regime, 1, 0)).audit;
        assert_eq!(a.target, 0, "{regime:?}");
        assert_eq!(
            a.source,
            split.labeled_train.len() + split.labeled_val.len(),
            "{regime:?}"
        );
    }
    let a = run(&config(Regime::UpperBound, 1, 0)).audit;
    assert_eq!(a.source, 0);
    assert_eq!(a.target, split.upper_train.len() + split.upper_val.len());
}

#[test]
fn vanishing_lambda_freezes_the_decoder() {
    let (corpus, split) = fixture();
    let model = ModelConfig::tiny();
    let init = Network::<f32>::build(&model, 8, true, false).unwrap();
    let step = |lambda: f64| {
        let mut cfg = config(Regime::Joint, 1, 8);
        cfg.loss.lambda = lambda;
        train_joint(&model, &cfg, &TrainData::new(corpus, split), &RunOptions::default()).unwrap()
    };
    let tiny = step(1e-12).checkpoint.net;
    assert!(max_abs_diff(&tiny.unet.decoder_tensors(), &init.unet.decoder_tensors()) < 1e-6);
    assert!(max_abs_diff(&tiny.unet.encoder_tensors(), &init.unet.encoder_tensors()) > 1e-4);

    let full = step(20.0).checkpoint.net;
    assert!(max_abs_diff(&full.unet.decoder_tensors(), &init.unet.decoder_tensors()) > 1e-4);
    let (hf, hi) = (full.head.as_ref().unwrap(), init.head.as_ref().unwrap());
    assert!(max_abs_diff(&hf.tensors(""), &hi.tensors("")) > 1e-4);
}

#[test]
fn labeled_fraction_keeps_floor_of_half() {
    let (_, split) = fixture();
    let mut cfg = config(Regime::Baseline, 1, 0);
    cfg.labeled_fraction = 0.5;
    let a = run(&cfg).audit;
    assert_eq!(a.source, split.labeled_train.len() / 2 + split.labeled_val.len());
}

#[test]
fn ties_keep_the_earliest_epoch() {
    // A learning rate this small cannot move f32 weights, so every epoch
    // scores the same.
    let mut cfg = config(Regime::Baseline, 3, 0);
    cfg.lr = 1e-30;
    let out = run(&cfg);
    let val: Vec<f64> = out
        .log
        .iter()
        .filter(|l| l.split == "val" && l.class == "all")
        .map(|l| l.value)
        .collect();
    assert_eq!(val.len(), 3);
    assert!(val.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(out.checkpoint.epoch, 0);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (corpus, split) = fixture();
    let model = ModelConfig::tiny();
    let dir = tempfile::tempdir().unwrap();
    for regime in [Regime::Joint, Regime::PretrainFinetune] {
        let cfg = config(regime, 3, 9);
        let state = dir.path().join(format!("{regime:?}.state"));
        let full = run(&cfg);
        let first = train(
            &model,
            &cfg,
            &TrainData::new(corpus, split),
            &RunOptions {
                state_path: Some(state.clone()),
                resume: false,
                stop_after_epochs: Some(1),
            },
        )
        .unwrap();
        assert!(!first.completed);
        let rest = train(
            &model,
            &cfg,
            &TrainData::new(corpus, split),
            &RunOptions {
                state_path: Some(state),
                resume: true,
                stop_after_epochs: None,
            },
        )
        .unwrap();
        assert!(rest.completed);
        assert_eq!(rest.log, full.log, "{regime:?}");
        assert_eq!(rest.checkpoint.net.tensors(""), full.checkpoint.net.tensors(""));
        assert_eq!(rest.checkpoint.epoch, full.checkpoint.epoch);
    }
}
