use serde::{Deserialize, Serialize};

use crate::epidata::EpidemicDataset;
use crate::scalar::Scalar;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BaselineKind {
    /// Mean of the whole history.
    Avg,
    /// Mean of the last `h` days.
    AvgWindow,
    LastDay,
    /// Least-squares line over `(day index, count)`, extrapolated.
    LinReg,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [Self::Avg, Self::AvgWindow, Self::LastDay, Self::LinReg];

    pub fn id(self) -> &'static str {
        match self {
            Self::Avg => "AVG",
            Self::AvgWindow => "AVG_WINDOW",
            Self::LastDay => "LAST_DAY",
            Self::LinReg => "LIN_REG",
        }
    }
}

fn mean<S: Scalar>(xs: &[S]) -> S {
    xs.iter().copied().sum::<S>() / S::from_usize_lossy(xs.len())
}

/// Forecast of one region's next `h` days from its history.
pub fn baseline_series<S: Scalar>(kind: BaselineKind, history: &[S], h: usize) -> Result<Vec<S>, Error> {
    let needed = match kind {
        BaselineKind::LinReg => 2,
        BaselineKind::AvgWindow => h.max(1),
        _ => 1,
    };
    if history.len() < needed {
        return Err(Error::InsufficientData(format!(
            "{} needs {needed} context days, got {}",
            kind.id(),
            history.len()
        )));
    }
    Ok(match kind {
        BaselineKind::Avg => vec![mean(history); h],
        BaselineKind::AvgWindow => vec![mean(&history[history.len() - h..]); h],
        BaselineKind::LastDay => vec![history[history.len() - 1]; h],
        BaselineKind::LinReg => {
            let n = history.len();
            let t_mean = S::from_usize_lossy(n - 1) / S::lit(2.0);
            let y_mean = mean(history);
            let (mut sxy, mut sxx) = (S::zero(), S::zero());
            for (t, &y) in history.iter().enumerate() {
                let dt = S::from_usize_lossy(t) - t_mean;
                sxy += dt * (y - y_mean);
                sxx += dt * dt;
            }
            let slope = sxy / sxx;
            let intercept = y_mean - slope * t_mean;
            (n..n + h).map(|t| intercept + slope * S::from_usize_lossy(t)).collect()
        }
    })
}

/// `[h][N]` predictions in count units from the days before `context_end`.
pub fn baseline_predict<S: Scalar>(kind: BaselineKind, ds: &EpidemicDataset<S>, context_end: usize, h: usize) -> Result<Vec<Vec<S>>, Error> {
    if context_end > ds.n_days() {
        return Err(Error::InsufficientData(format!(
            "context end {context_end} is past the last day {}",
            ds.n_days()
        )));
    }
    let per_region: Vec<Vec<S>> = (0..ds.n_regions())
        .map(|i| {
            let history: Vec<S> = ds.counts[..context_end].iter().map(|row| row[i]).collect();
            baseline_series(kind, &history, h)
        })
        .collect::<Result<_, _>>()?;
    Ok((0..h).map(|t| per_region.iter().map(|r| r[t]).collect()).collect())
}
