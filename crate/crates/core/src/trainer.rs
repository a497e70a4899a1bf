//! Next-patch training of both branches with Adam and early stopping.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::epidata::{DataSplit, EpidemicDataset};
use crate::model::{DailyInputs, EpiModel, PatchWindows};
use crate::prompt::PromptValues;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossForm {
    /// Mean of squared errors over every element.
    #[default]
    MeanSquared,
    /// Mean over tokens of the Euclidean norm of the error vector.
    MeanL2Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub loss_form: LossForm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lr: 1e-3,
            max_epochs: 500,
            patience: 50,
            loss_form: LossForm::MeanSquared,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossParts {
    pub total: Var,
    pub epi: Var,
    pub mob: Var,
}

fn token_loss<S: Scalar>(g: &mut Graph<S>, pred: Var, target: Var, form: LossForm) -> Result<Var, Error> {
    let (ps, ts) = (g.shape(pred).to_vec(), g.shape(target).to_vec());
    if ps != ts {
        return Err(Error::Shape(format!("prediction {ps:?} and target {ts:?} differ")));
    }
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff)?;
    match form {
        LossForm::MeanSquared => Ok(g.mean(sq)?),
        LossForm::MeanL2Norm => {
            let last = ps.len() - 1;
            let per_token = g.sum_axis(sq, last)?;
            let norms = g.sqrt(per_token)?;
            Ok(g.mean(norms)?)
        }
    }
}

/// `L_epi + λ·L_mob`. Predictions and targets must already be aligned.
pub fn compute_loss<S: Scalar>(
    g: &mut Graph<S>,
    epi_pred: Var,
    epi_target: Var,
    mob_pred: Var,
    mob_target: Var,
    lambda: S,
    form: LossForm,
) -> Result<LossParts, Error> {
    if lambda.is_nan() || lambda < S::zero() {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let epi = token_loss(g, epi_pred, epi_target, form)?;
    let mob = token_loss(g, mob_pred, mob_target, form)?;
    let weighted = g.mul_scalar(mob, lambda)?;
    let total = g.add(epi, weighted)?;
    Ok(LossParts { total, epi, mob })
}

/// Scalar losses of one pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub epi: f64,
    pub mob: f64,
}

/// Records the next-patch loss over `windows`, keeping only the last `targets` target patches.
pub fn sequence_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &EpiModel<S>,
    windows: &PatchWindows<S>,
    targets: usize,
    lambda: S,
    form: LossForm,
) -> Result<LossParts, Error> {
    let p = windows.n_patches();
    if p < 2 || targets == 0 || targets > p - 1 {
        return Err(Error::InsufficientData(format!(
            "{p} patches cannot supervise {targets} next-patch targets"
        )));
    }
    let out = model.forward(g, windows)?;
    let first_pred = p - 1 - targets;
    let epi_pred = g.slice(out.epi, 1, first_pred, targets)?;
    let mob_pred = g.slice(out.mob, 1, first_pred, targets)?;
    let epi_all = g.constant(windows.epi_targets())?;
    let mob_all = g.constant(windows.mob_targets())?;
    let epi_target = g.slice(epi_all, 1, first_pred + 1, targets)?;
    let mob_target = g.slice(mob_all, 1, first_pred + 1, targets)?;
    compute_loss(g, epi_pred, epi_target, mob_pred, mob_target, lambda, form)
}

fn values<S: Scalar>(g: &Graph<S>, parts: &LossParts) -> LossValues {
    LossValues {
        total: g.value(parts.total).item().to_f64_lossy(),
        epi: g.value(parts.epi).item().to_f64_lossy(),
        mob: g.value(parts.mob).item().to_f64_lossy(),
    }
}

/// Adam over the non-frozen parameters of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: i32,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S) -> Self {
        Self {
            lr,
            beta1: S::lit(0.9),
            beta2: S::lit(0.999),
            eps: S::lit(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<S>) {
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = S::one() - self.beta1.powi(self.step);
        let bc2 = S::one() - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id);
            if param.frozen {
                continue;
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((x, &g), mi), vi) in param.value.data_mut().iter_mut().zip(param.grad.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (S::one() - self.beta1) * g;
                *vi = self.beta2 * *vi + (S::one() - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the monitored loss has failed to improve for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub trainable: usize,
    pub total: usize,
    pub ratio: f64,
}

pub fn count_params<S: Scalar>(store: &ParamStore<S>) -> Result<ParamCounts, Error> {
    let (trainable, total) = store.counts();
    if total == 0 {
        return Err(Error::EmptyModel);
    }
    Ok(ParamCounts {
        trainable,
        total,
        ratio: trainable as f64 / total as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossValues,
    pub val: LossValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Last epoch that ran (1-based).
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub prompts: PromptValues,
    pub params: ParamCounts,
}

/// Teacher-forced patches for the training and validation ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindows<S> {
    pub train: PatchWindows<S>,
    pub val: PatchWindows<S>,
    /// Validation target patches, all ending inside the validation range.
    pub val_targets: usize,
}

impl<S: Scalar> TrainingWindows<S> {
    pub fn build(model: &EpiModel<S>, ds: &EpidemicDataset<S>, train: Range<usize>, val: Range<usize>) -> Result<Self, Error> {
        let w = model.window();
        if train.start != 0 || val.start != train.end || val.end > ds.n_days() {
            return Err(Error::Config(format!(
                "training range {train:?} and validation range {val:?} must be consecutive from day 0"
            )));
        }
        let train_windows = DailyInputs::from_dataset(ds, train.end).windows(w, model.max_patches())?;
        if train_windows.n_patches() < 2 {
            return Err(Error::InsufficientData(format!(
                "training range of {} days yields fewer than 2 patches of {w} days",
                train.len()
            )));
        }
        let val_windows = DailyInputs::from_dataset(ds, val.end).windows(w, model.max_patches())?;
        let val_targets = val_windows
            .patch_days
            .iter()
            .skip(1)
            .filter(|r| r.end > val.start)
            .count();
        if val_targets == 0 {
            return Err(Error::InsufficientData(format!(
                "validation range {val:?} holds no complete {w}-day target patch"
            )));
        }
        Ok(Self {
            train: train_windows,
            val: val_windows,
            val_targets,
        })
    }
}

/// Evaluates the training and validation loss without touching gradients.
pub fn evaluate_losses<S: Scalar>(model: &EpiModel<S>, windows: &TrainingWindows<S>, cfg: &TrainConfig) -> Result<(LossValues, LossValues), Error> {
    let lambda = S::lit(cfg.lambda);
    let mut g = Graph::new();
    let tp = sequence_loss(&mut g, model, &windows.train, windows.train.n_patches() - 1, lambda, cfg.loss_form)?;
    let train = values(&g, &tp);
    let mut g = Graph::new();
    let vp = sequence_loss(&mut g, model, &windows.val, windows.val_targets, lambda, cfg.loss_form)?;
    Ok((train, values(&g, &vp)))
}

/// Full-batch training on `split.train`, early stopping on the total validation loss.
///
/// The reported train loss of an epoch is measured before that epoch's update.
/// Parameters from the best validation epoch are restored before returning.
pub fn train<S: Scalar>(model: &mut EpiModel<S>, ds: &EpidemicDataset<S>, split: &DataSplit, cfg: &TrainConfig) -> Result<TrainReport, Error> {
    cfg.validate()?;
    let params = count_params(&model.store)?;
    let windows = TrainingWindows::build(model, ds, split.train.clone(), split.val.clone())?;
    let lambda = S::lit(cfg.lambda);
    let train_targets = windows.train.n_patches() - 1;
    let mut adam = Adam::new(S::lit(cfg.lr));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_store = model.store.clone();
    let mut logs = Vec::new();
    let diverged = |epoch: usize| move |e: Error| match e {
        Error::Graph(_) => Error::Divergence { epoch },
        other => other,
    };

    for epoch in 1..=cfg.max_epochs {
        model.store.zero_grad();
        let mut g = Graph::new();
        let parts = sequence_loss(&mut g, model, &windows.train, train_targets, lambda, cfg.loss_form).map_err(diverged(epoch))?;
        let train_loss = values(&g, &parts);
        g.backward(parts.total).map_err(Error::from).map_err(diverged(epoch))?.accumulate_into(&mut model.store);
        adam.step(&mut model.store);
        if !model.store.iter().all(|(_, p)| p.value.all_finite()) {
            return Err(Error::Divergence { epoch });
        }

        let mut g = Graph::new();
        let vp = sequence_loss(&mut g, model, &windows.val, windows.val_targets, lambda, cfg.loss_form).map_err(diverged(epoch))?;
        let val_loss = values(&g, &vp);
        logs.push(EpochLog {
            epoch,
            train: train_loss,
            val: val_loss,
        });
        match stopper.observe(epoch, val_loss.total) {
            StopDecision::Improved => best_store = model.store.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    model.store = best_store;
    model.store.zero_grad();
    Ok(TrainReport {
        stopped_epoch: logs.len(),
        best_epoch: stopper.best_epoch.unwrap_or(0),
        best_val: stopper.best,
        epochs: logs,
        prompts: model.prompts.values(&model.store),
        params,
    })
}
