use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::Error;

fn check<S>(y: &[S], y_hat: &[S]) -> Result<(), Error> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!("truth has {} values, prediction {}", y.len(), y_hat.len())));
    }
    if y.is_empty() {
        return Err(Error::Shape("metrics need at least one value".into()));
    }
    Ok(())
}

pub fn rmse<S: Scalar>(y: &[S], y_hat: &[S]) -> Result<S, Error> {
    check(y, y_hat)?;
    let sq: S = y.iter().zip(y_hat).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok((sq / S::from_usize_lossy(y.len())).sqrt())
}

pub fn mae<S: Scalar>(y: &[S], y_hat: &[S]) -> Result<S, Error> {
    check(y, y_hat)?;
    let abs: S = y.iter().zip(y_hat).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(abs / S::from_usize_lossy(y.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub region: String,
    pub rmse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub model: String,
    pub window: usize,
    pub horizon: usize,
    pub per_region: Vec<RegionMetrics>,
    /// Unweighted mean of the per-region values.
    pub region_avg_rmse: f64,
    pub region_avg_mae: f64,
}

/// Scores `[h][N]` predictions against `[h][N]` truth, region by region.
pub fn evaluate_predictions<S: Scalar>(
    dataset: &str,
    model: &str,
    window: usize,
    regions: &[String],
    truth: &[Vec<S>],
    pred: &[Vec<S>],
) -> Result<MetricReport, Error> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!("truth covers {} days, prediction {}", truth.len(), pred.len())));
    }
    if regions.is_empty() {
        return Err(Error::Shape("no regions to evaluate".into()));
    }
    let column = |rows: &[Vec<S>], i: usize| -> Result<Vec<f64>, Error> {
        rows.iter()
            .map(|r| r.get(i).map(|x| x.to_f64_lossy()).ok_or_else(|| Error::Shape("row shorter than region list".into())))
            .collect()
    };
    let mut per_region = Vec::with_capacity(regions.len());
    for (i, name) in regions.iter().enumerate() {
        let (y, y_hat) = (column(truth, i)?, column(pred, i)?);
        per_region.push(RegionMetrics {
            region: name.clone(),
            rmse: rmse(&y, &y_hat)?,
            mae: mae(&y, &y_hat)?,
        });
    }
    let n = per_region.len() as f64;
    Ok(MetricReport {
        dataset: dataset.to_owned(),
        model: model.to_owned(),
        window,
        horizon: truth.len(),
        region_avg_rmse: per_region.iter().map(|r| r.rmse).sum::<f64>() / n,
        region_avg_mae: per_region.iter().map(|r| r.mae).sum::<f64>() / n,
        per_region,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        assert_eq!(rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(mae(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 3.5);
        assert_eq!(rmse(&[2.0], &[5.0]).unwrap(), 3.0);
        assert_eq!(mae(&[2.0], &[5.0]).unwrap(), 3.0);
        assert!(rmse::<f64>(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn region_average_is_mean() {
        let regions = vec!["a".to_string(), "b".to_string()];
        let truth = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
        let pred = vec![vec![2.0, 1.0], vec![2.0, 1.0]];
        let r = evaluate_predictions("x", "m", 3, &regions, &truth, &pred).unwrap();
        assert_eq!(r.per_region[0].rmse, 2.0);
        assert_eq!(r.per_region[1].rmse, 0.0);
        assert_eq!(r.region_avg_rmse, 1.0);
        assert_eq!(r.horizon, 2);
    }
}
