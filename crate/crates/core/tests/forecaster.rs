mod common;

use epitoken::backbone::BackboneMode;
use epitoken::epidata::SplitSpec;
use epitoken::forecaster::forecast;
use epitoken::model::EpiModel;
use epitoken::trainer::{train, TrainConfig};
use epitoken::Error;

fn trained(w: usize) -> (EpiModel<f64>, epitoken::Dataset) {
    let ds = common::dataset(5, 40, w, 4);
    let split = SplitSpec::new(w, w).split(40).unwrap();
    let mut model = EpiModel::<f64>::new(common::config(5, w, 8, BackboneMode::FrozenTransformer)).unwrap();
    let cfg = TrainConfig {
        max_epochs: 10,
        patience: 10,
        ..Default::default()
    };
    train(&mut model, &ds, &split, &cfg).unwrap();
    (model, ds)
}

#[test]
fn horizon_is_steps_times_window() {
    let (model, ds) = trained(3);
    let f = forecast(&model, &ds, 30, 1).unwrap();
    assert_eq!(f.horizon(), 3);
    assert!(f.cases.iter().all(|row| row.len() == 5));
    for steps in [2, 3, 5] {
        let f = forecast(&model, &ds, 30, steps).unwrap();
        assert_eq!(f.horizon(), 3 * steps);
        assert_eq!(f.mobility.len(), steps);
        assert_eq!(f.adjacency.len(), steps);
    }
    let (model7, ds7) = trained(7);
    assert_eq!(forecast(&model7, &ds7, 26, 2).unwrap().horizon(), 14);
}

#[test]
fn prefix_consistency_and_determinism() {
    let (model, ds) = trained(3);
    let one = forecast(&model, &ds, 30, 1).unwrap();
    let two = forecast(&model, &ds, 30, 2).unwrap();
    for (a, b) in one.cases.iter().zip(&two.cases[..3]) {
        let (a, b): (Vec<u64>, Vec<u64>) = (a.iter().map(|x| x.to_bits()).collect(), b.iter().map(|x| x.to_bits()).collect());
        assert_eq!(a, b);
    }
    assert_eq!(one.mobility[0], two.mobility[0]);
    assert_eq!(two, forecast(&model, &ds, 30, 2).unwrap());
}

#[test]
fn outputs_are_nonnegative_and_adjacency_follows_threshold() {
    let (model, ds) = trained(3);
    let f = forecast(&model, &ds, 33, 4).unwrap();
    assert!(f.cases.iter().flatten().all(|&x| x >= 0.0 && x.is_finite()));
    for (m, a) in f.mobility.iter().zip(&f.adjacency) {
        assert!(m.data().iter().all(|&x| x >= 0.0));
        for (&mv, &av) in m.data().iter().zip(a.data()) {
            assert_eq!(av > 0.0, mv > ds.options.epsilon);
        }
    }
    assert_eq!(f.mobility_summaries().len(), 4);
}

#[test]
fn invalid_requests() {
    let (model, ds) = trained(3);
    assert!(matches!(forecast(&model, &ds, 2, 1), Err(Error::InsufficientData(_))));
    assert!(matches!(forecast(&model, &ds, 41, 1), Err(Error::InsufficientData(_))));
    assert!(matches!(forecast(&model, &ds, 30, 0), Err(Error::Config(_))));
    let other = common::dataset(6, 40, 3, 4);
    assert!(matches!(forecast(&model, &other, 30, 1), Err(Error::Shape(_))));
}
