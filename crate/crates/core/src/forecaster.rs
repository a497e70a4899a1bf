//! Patch-by-patch rollout of both branches.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::epidata::{threshold_adjacency, window_features, EpidemicDataset};
use crate::model::{DailyInputs, EpiModel, GeneratedAdjacency};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult<S> {
    /// First forecast day (the context is `0..start_day`).
    pub start_day: usize,
    pub steps: usize,
    pub window: usize,
    /// `[h][N]` predicted daily new cases in count units.
    pub cases: Vec<Vec<S>>,
    /// Predicted mobility per generated patch, `[N, N]` in flow units.
    pub mobility: Vec<Tensor<S>>,
    /// Thresholded adjacency per generated patch, flow units.
    pub adjacency: Vec<Tensor<S>>,
}

impl<S: Scalar> ForecastResult<S> {
    pub fn horizon(&self) -> usize {
        self.cases.len()
    }

    /// Series of one region over the horizon.
    pub fn region(&self, i: usize) -> Vec<S> {
        self.cases.iter().map(|row| row[i]).collect()
    }

    pub fn mobility_summaries(&self) -> Vec<MobilitySummary> {
        self.mobility
            .iter()
            .zip(&self.adjacency)
            .enumerate()
            .map(|(k, (m, a))| MobilitySummary {
                step: k + 1,
                total_flow: m.sum().to_f64_lossy(),
                max_flow: m.max_abs().to_f64_lossy(),
                edges: a.data().iter().filter(|&&x| x > S::zero()).count(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilitySummary {
    pub step: usize,
    pub total_flow: f64,
    pub max_flow: f64,
    pub edges: usize,
}

/// Generates `steps` patches after `context_end`.
///
/// Each step first predicts the next mobility matrix and its thresholded
/// adjacency, then the next case block. Both are appended to the context; the
/// generated days' features are rebuilt from the extended daily case series by
/// the same windowing routine used at ingestion.
pub fn forecast<S: Scalar>(model: &EpiModel<S>, ds: &EpidemicDataset<S>, context_end: usize, steps: usize) -> Result<ForecastResult<S>, Error> {
    let w = model.window();
    let n = ds.n_regions();
    if steps == 0 {
        return Err(Error::Config("forecast needs at least one step".into()));
    }
    if ds.window() != w || n != model.config.regions {
        return Err(Error::Shape(format!(
            "dataset (N={n}, w={}) does not match model (N={}, w={w})",
            ds.window(),
            model.config.regions
        )));
    }
    if context_end > ds.n_days() || context_end < w {
        return Err(Error::InsufficientData(format!(
            "context of {context_end} days holds no full {w}-day patch"
        )));
    }
    let mut daily = DailyInputs::from_dataset(ds, context_end);
    let mut series: Vec<Vec<S>> = ds.scaled_counts()[..context_end].to_vec();
    let eps = S::lit(ds.options.epsilon) / ds.mobility_scale;

    let mut cases = Vec::with_capacity(steps * w);
    let mut mobility = Vec::with_capacity(steps);
    let mut adjacency = Vec::with_capacity(steps);
    for step in 1..=steps {
        let windows = daily.windows(w, model.max_patches())?;
        let last = windows.n_patches() - 1;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &windows).map_err(|e| match e {
            Error::Graph(_) => Error::NonFiniteForecast { step },
            other => other,
        })?;
        let epi = g.value(out.epi);
        let mob = g.value(out.mob);
        let m_hat = Tensor::from_fn(&[n, n], |k| mob.data()[((k / n) * (last + 1) + last) * n + k % n]);
        let x_hat: Vec<Vec<S>> = (0..w)
            .map(|day| (0..n).map(|i| epi.data()[(i * (last + 1) + last) * w + day].max(S::zero())).collect())
            .collect();
        if !m_hat.all_finite() || x_hat.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteForecast { step });
        }
        let a_hat = threshold_adjacency(&m_hat, eps);
        let a_next = match model.config.generated_adjacency {
            GeneratedAdjacency::Predicted => a_hat.clone(),
            GeneratedAdjacency::WindowAverage => {
                // running mean, exact when all matrices are equal
                let recent = &daily.adjacency[daily.len() - w..];
                let mut acc = recent[0].clone();
                for (k, a) in recent.iter().enumerate().skip(1) {
                    let c = S::from_usize_lossy(k + 1);
                    acc = acc.zip_map(a, |m, x| m + (x - m) / c);
                }
                acc
            }
            GeneratedAdjacency::Previous => daily.adjacency[daily.len() - 1].clone(),
        };

        series.extend(x_hat.iter().cloned());
        let feats = window_features(&series[series.len() - (2 * w - 1)..], w);
        // the last w rows of `feats` belong to the generated days
        let rows = feats.shape()[0];
        for t in rows - w..rows {
            daily.features.push(feats.index0(t));
            daily.adjacency.push(a_next.clone());
            daily.mobility.push(m_hat.clone());
        }

        for row in &x_hat {
            cases.push(row.iter().zip(&ds.case_scale).map(|(&x, &s)| x * s).collect());
        }
        mobility.push(m_hat.map(|x| x * ds.mobility_scale));
        adjacency.push(a_hat.map(|x| x * ds.mobility_scale));
    }
    Ok(ForecastResult {
        start_day: context_end,
        steps,
        window: w,
        cases,
        mobility,
        adjacency,
    })
}
