mod common;

use epitoken::autodiff::{Graph, ParamStore};
use epitoken::backbone::BackboneMode;
use epitoken::epidata::SplitSpec;
use epitoken::model::{patch_ranges, DailyInputs, EpiModel};
use epitoken::tensor::Tensor;
use epitoken::trainer::{
    compute_loss, count_params, evaluate_losses, train, Adam, EarlyStopping, LossForm, StopDecision, TrainConfig, TrainingWindows,
};
use epitoken::Error;

fn loss_of(pred: Vec<f64>, target: Vec<f64>, shape: &[usize], lambda: f64, form: LossForm) -> (f64, f64) {
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(shape.to_vec(), pred).unwrap()).unwrap();
    let t = g.constant(Tensor::new(shape.to_vec(), target).unwrap()).unwrap();
    let mp = g.constant(Tensor::full(&[1, 1, 2], 1.0)).unwrap();
    let mt = g.constant(Tensor::zeros(&[1, 1, 2])).unwrap();
    let parts = compute_loss(&mut g, p, t, mp, mt, lambda, form).unwrap();
    (g.value(parts.total).item(), g.value(parts.epi).item())
}

#[test]
fn loss_hand_values() {
    let (total, epi) = loss_of(vec![3.0, 4.0], vec![0.0, 0.0], &[1, 1, 2], 0.0, LossForm::MeanL2Norm);
    assert_eq!(epi, 5.0);
    assert_eq!(total, epi);
    let (_, mse) = loss_of(vec![3.0, 4.0], vec![0.0, 0.0], &[1, 1, 2], 0.0, LossForm::MeanSquared);
    assert_eq!(mse, 12.5);
    let (total, epi) = loss_of(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0], &[1, 1, 3], 2.0, LossForm::MeanSquared);
    assert_eq!(epi, 0.0);
    // mobility term: mean of (1,1) squared = 1, norm = √2
    assert_eq!(total, 2.0);
    let (total, _) = loss_of(vec![0.0], vec![0.0], &[1, 1, 1], 1.0, LossForm::MeanL2Norm);
    assert!((total - 2f64.sqrt()).abs() < 1e-15);
}

#[test]
fn loss_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[1, 2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[1, 3, 3])).unwrap();
    assert!(compute_loss(&mut g, a, b, a, a, 1.0, LossForm::MeanSquared).is_err());
    assert!(compute_loss(&mut g, a, a, a, a, -1.0, LossForm::MeanSquared).is_err());
}

#[test]
fn one_adam_step_matches_closed_form() {
    let mut store = ParamStore::<f64>::new();
    let x = store.register("x", Tensor::scalar(1.5), false);
    let frozen = store.register("f", Tensor::scalar(2.0), true);
    // loss = 3x + 7f, gradient 3 and 7
    store.grad_mut(x).data_mut()[0] = 3.0;
    store.grad_mut(frozen).data_mut()[0] = 7.0;
    let lr = 1e-3;
    let mut adam = Adam::new(lr);
    adam.step(&mut store);
    let m = (1.0 - 0.9) * 3.0;
    let v = (1.0 - 0.999) * 9.0;
    let m_hat = m / (1.0 - 0.9);
    let v_hat = v / (1.0 - 0.999);
    let expected = 1.5 - lr * m_hat / (f64::sqrt(v_hat) + 1e-8);
    assert!((store.value(x).item() - expected).abs() < 1e-12);
    assert_eq!(store.value(frozen).item(), 2.0);
}

#[test]
fn early_stopping_rule() {
    let mut es = EarlyStopping::new(1);
    assert_eq!(es.observe(1, 1.0), StopDecision::Improved);
    assert_eq!(es.observe(2, 2.0), StopDecision::Stop);
    assert_eq!(es.best_epoch, Some(1));

    let mut es = EarlyStopping::new(3);
    let losses = [5.0, 4.0, 4.5, 3.0, 3.1, 3.2, 3.3, 1.0];
    let mut stopped = None;
    for (k, &l) in losses.iter().enumerate() {
        if es.observe(k + 1, l) == StopDecision::Stop {
            stopped = Some(k + 1);
            break;
        }
    }
    assert_eq!(stopped, Some(7));
    assert_eq!((es.best, es.best_epoch), (3.0, Some(4)));
}

#[test]
fn parameter_counts() {
    assert!(matches!(count_params(&ParamStore::<f64>::new()), Err(Error::EmptyModel)));
    let ident = EpiModel::<f64>::new(common::config(4, 3, 8, BackboneMode::Identity)).unwrap();
    let c = count_params(&ident.store).unwrap();
    assert_eq!(c.trainable, c.total);
    assert_eq!(c.ratio, 1.0);

    let mut small = common::config(4, 3, 64, BackboneMode::FrozenTransformer);
    small.backbone.heads = 4;
    let mut large = common::config(4, 3, 256, BackboneMode::FrozenTransformer);
    large.backbone.heads = 4;
    large.backbone.depth = 4;
    let rs = count_params(&EpiModel::<f64>::new(small).unwrap().store).unwrap();
    let rl = count_params(&EpiModel::<f64>::new(large).unwrap().store).unwrap();
    assert!(rs.ratio < 1.0);
    assert!(rl.ratio < rs.ratio, "{rl:?} vs {rs:?}");
}

#[test]
fn patch_partition_tiles_the_range() {
    for (t, w) in [(24, 3), (25, 3), (61, 7), (7, 7)] {
        let ranges = patch_ranges(t, t / w, w);
        assert_eq!(ranges.len(), t / w);
        assert_eq!(ranges.last().unwrap().end, t);
        for pair in ranges.windows(2) {
            assert_eq!(pair[0].end, pair[1].start);
        }
        assert!(ranges.iter().all(|r| r.len() == w));
        assert!(ranges.len() * w <= t);
    }
}

#[test]
fn training_is_deterministic_improves_and_keeps_backbone() {
    let ds = common::dataset(4, 30, 3, 2);
    let split = SplitSpec::new(3, 3).split(30).unwrap();
    let cfg = TrainConfig {
        max_epochs: 40,
        patience: 40,
        ..Default::default()
    };
    let mut model = EpiModel::<f64>::new(common::config(4, 3, 8, BackboneMode::FrozenTransformer)).unwrap();
    let before = model.backbone.digest(&model.store);
    let report = train(&mut model, &ds, &split, &cfg).unwrap();
    assert_eq!(model.backbone.digest(&model.store), before);
    assert!(report.epochs[1].train.total <= report.epochs[0].train.total);
    assert!(report.epochs.last().unwrap().train.total < report.epochs[0].train.total);
    assert!(report.params.ratio < 1.0);

    let min = report.epochs.iter().map(|e| e.val.total).fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_val, min);
    assert!(report.best_epoch <= report.stopped_epoch);
    // restored parameters reproduce the best validation loss exactly
    let windows = TrainingWindows::build(&model, &ds, split.train.clone(), split.val.clone()).unwrap();
    let (_, val) = evaluate_losses(&model, &windows, &cfg).unwrap();
    assert_eq!(val.total.to_bits(), report.best_val.to_bits());

    let mut again = EpiModel::<f64>::new(common::config(4, 3, 8, BackboneMode::FrozenTransformer)).unwrap();
    let report2 = train(&mut again, &ds, &split, &cfg).unwrap();
    assert_eq!(report, report2);
    assert_eq!(model.store.digest(|_| true), again.store.digest(|_| true));
}

#[test]
fn early_stop_restores_best_epoch() {
    let ds = common::dataset(4, 30, 3, 2);
    let split = SplitSpec::new(3, 3).split(30).unwrap();
    let cfg = TrainConfig {
        lr: 0.05,
        max_epochs: 60,
        patience: 2,
        ..Default::default()
    };
    let mut model = EpiModel::<f64>::new(common::config(4, 3, 8, BackboneMode::FrozenTransformer)).unwrap();
    let report = train(&mut model, &ds, &split, &cfg).unwrap();
    let tail = &report.epochs[report.best_epoch..];
    assert!(tail.iter().all(|e| e.val.total >= report.best_val));
    if report.stopped_epoch < cfg.max_epochs {
        assert_eq!(report.stopped_epoch, report.best_epoch + cfg.patience);
    }
}

#[test]
fn too_short_training_range() {
    let ds = common::dataset(4, 12, 3, 2);
    let split = SplitSpec::new(3, 6).split(12).unwrap();
    let mut model = EpiModel::<f64>::new(common::config(4, 3, 8, BackboneMode::FrozenTransformer)).unwrap();
    let err = train(&mut model, &ds, &split, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::InsufficientData(_)), "{err}");
}

#[test]
fn divergence_reports_epoch() {
    let ds = common::dataset(4, 30, 3, 2);
    let split = SplitSpec::new(3, 3).split(30).unwrap();
    let mut model = EpiModel::<f64>::new(common::config(4, 3, 8, BackboneMode::FrozenTransformer)).unwrap();
    let w = model.epi_adapter.linear.weight;
    model.store.get_mut(w).value = Tensor::full(&[8, 3], 1e300);
    let err = train(&mut model, &ds, &split, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Divergence { epoch: 1 }), "{err}");
}

#[test]
fn mobility_branch_does_not_touch_case_outputs() {
    let ds = common::dataset(4, 24, 3, 2);
    let mut model = EpiModel::<f64>::new(common::config(4, 3, 8, BackboneMode::FrozenTransformer)).unwrap();
    let windows = DailyInputs::from_dataset(&ds, 24).windows(3, 32).unwrap();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &windows).unwrap();
    let epi = g.value(out.epi).clone();
    let mob = g.value(out.mob).clone();
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("mob_"))
        .map(|(id, _)| id)
        .collect();
    assert!(!ids.is_empty());
    for id in ids {
        model.store.get_mut(id).value.fill(0.0);
    }
    let mut g = Graph::new();
    let out = model.forward(&mut g, &windows).unwrap();
    assert_eq!(g.value(out.epi), &epi);
    assert_ne!(g.value(out.mob), &mob);
}

#[test]
fn every_trainable_parameter_gets_a_gradient() {
    let ds = common::dataset(4, 24, 3, 2);
    for mode in [BackboneMode::FrozenTransformer, BackboneMode::Rnn, BackboneMode::Mlp] {
        let mut model = EpiModel::<f64>::new(common::config(4, 3, 8, mode)).unwrap();
        let windows = DailyInputs::from_dataset(&ds, 24).windows(3, 32).unwrap();
        let mut g = Graph::new();
        let parts = epitoken::trainer::sequence_loss(&mut g, &model, &windows, 7, 1.0, LossForm::MeanSquared).unwrap();
        g.backward(parts.total).unwrap().accumulate_into(&mut model.store);
        for (_, p) in model.store.iter() {
            if p.frozen {
                continue;
            }
            assert!(p.grad.data().iter().any(|&x| x != 0.0), "{mode:?}: {} has a zero gradient", p.name);
        }
    }
}
