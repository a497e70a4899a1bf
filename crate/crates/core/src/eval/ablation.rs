use crate::epidata::{DataSplit, EpidemicDataset};
use crate::forecaster::forecast;
use crate::model::{EpiModel, ModelConfig, Variant};
use crate::scalar::Scalar;
use crate::trainer::{train, TrainConfig, TrainReport};
use crate::Error;

use super::metrics::{evaluate_predictions, MetricReport};

/// Everything an ablation run needs besides the variant.
#[derive(Debug, Clone)]
pub struct AblationSetup<'a, S> {
    pub dataset_name: &'a str,
    pub dataset: &'a EpidemicDataset<S>,
    pub split: &'a DataSplit,
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub steps: usize,
}

/// Trains `variant` from scratch and scores its forecast of the test range.
pub fn run_ablation<S: Scalar>(variant: Variant, setup: &AblationSetup<'_, S>) -> Result<(MetricReport, TrainReport), Error> {
    let config = variant.apply(setup.model);
    let mut model = EpiModel::<S>::new(config)?;
    let report = train(&mut model, setup.dataset, setup.split, setup.train)?;
    let start = setup.split.test.start;
    let result = forecast(&model, setup.dataset, start, setup.steps)?;
    let h = result.horizon();
    if start + h > setup.dataset.n_days() {
        return Err(Error::InsufficientData(format!(
            "{h}-day forecast from day {start} runs past the data"
        )));
    }
    let truth = &setup.dataset.counts[start..start + h];
    let metrics = evaluate_predictions(
        setup.dataset_name,
        variant.id(),
        model.window(),
        &setup.dataset.regions,
        truth,
        &result.cases,
    )?;
    Ok((metrics, report))
}
