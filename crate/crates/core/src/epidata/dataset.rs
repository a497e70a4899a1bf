use std::collections::HashMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::tables::{CaseTable, MobilityTable};
use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Raw counts and flows.
    #[default]
    None,
    /// Cases divided by each region's maximum daily count, flows by the global maximum flow.
    PerRegionMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub window: usize,
    /// Flows at or below this value are not edges.
    pub epsilon: f64,
    pub normalize: Normalization,
    /// Fit the normalization on the first this-many days only; all days when `None`.
    #[serde(default)]
    pub scale_days: Option<usize>,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            window: 3,
            epsilon: 0.0,
            normalize: Normalization::None,
            scale_days: None,
        }
    }
}

/// Aligned case features and mobility graphs over `T` days and `N` regions.
#[derive(Debug, Clone, PartialEq)]
pub struct EpidemicDataset<S> {
    pub regions: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub options: DatasetOptions,
    /// `[T, N, w]`: row `(t, i)` holds the (scaled) counts of days `t-w+1..=t`, oldest first.
    pub features: Tensor<S>,
    /// `[T, N, N]`, entry `(t, i, j)` is the flow from region `i` to region `j`.
    pub mobility: Tensor<S>,
    /// `[T, N, N]`, `mobility` with entries at or below epsilon zeroed.
    pub adjacency: Tensor<S>,
    /// Unscaled daily counts, `[T][N]`.
    pub counts: Vec<Vec<S>>,
    /// Per-region divisor applied to counts before windowing.
    pub case_scale: Vec<S>,
    /// Global divisor applied to flows.
    pub mobility_scale: S,
}

impl<S: Scalar> EpidemicDataset<S> {
    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn window(&self) -> usize {
        self.options.window
    }

    /// Scaled daily counts, `[T][N]`.
    pub fn scaled_counts(&self) -> Vec<Vec<S>> {
        self.counts
            .iter()
            .map(|row| row.iter().zip(&self.case_scale).map(|(&c, &s)| c / s).collect())
            .collect()
    }

    /// Unscaled count series of one region.
    pub fn region_series(&self, region: usize) -> Vec<S> {
        self.counts.iter().map(|row| row[region]).collect()
    }

    pub fn mobility_at(&self, day: usize) -> Tensor<S> {
        self.mobility.index0(day)
    }

    pub fn adjacency_at(&self, day: usize) -> Tensor<S> {
        self.adjacency.index0(day)
    }

    pub fn features_at(&self, day: usize) -> Tensor<S> {
        self.features.index0(day)
    }
}

/// Sliding-window features: row `(t, i)` = `series[t-w+1..=t][i]`, zero
/// before the first day. Shared by ingestion and by forecasting rollouts.
pub fn window_features<S: Scalar>(series: &[Vec<S>], window: usize) -> Tensor<S> {
    let t_len = series.len();
    let n = series.first().map_or(0, Vec::len);
    let mut out = Tensor::zeros(&[t_len, n, window]);
    let d = out.data_mut();
    for t in 0..t_len {
        for i in 0..n {
            for k in 0..window {
                // slot k holds day t - (window - 1 - k)
                let back = window - 1 - k;
                if t >= back {
                    d[(t * n + i) * window + k] = series[t - back][i];
                }
            }
        }
    }
    out
}

/// Zeroes every entry at or below `epsilon`.
pub fn threshold_adjacency<S: Scalar>(m: &Tensor<S>, epsilon: S) -> Tensor<S> {
    m.map(|x| if x > epsilon { x } else { S::zero() })
}

pub fn build_dataset<S: Scalar>(
    cases: &CaseTable,
    mobility: &MobilityTable,
    options: DatasetOptions,
) -> Result<EpidemicDataset<S>, DataError> {
    let w = options.window;
    if w == 0 {
        return Err(DataError::InvalidWindow(w));
    }
    if !(options.epsilon.is_finite() && options.epsilon >= 0.0) {
        return Err(DataError::InvalidEpsilon(options.epsilon));
    }
    let (Some(&c0), Some(&c1)) = (cases.dates.first(), cases.dates.last()) else {
        return Err(DataError::EmptyOverlap);
    };
    let (Some(&m0), Some(&m1)) = (mobility.dates.first(), mobility.dates.last()) else {
        return Err(DataError::EmptyOverlap);
    };
    let start = c0.max(m0);
    let end = c1.min(m1);
    if start > end {
        return Err(DataError::EmptyOverlap);
    }
    let region_idx: HashMap<&str, usize> = cases.regions.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    for r in mobility.regions() {
        if !region_idx.contains_key(r.as_str()) {
            return Err(DataError::RegionMismatch(r));
        }
    }

    let first = cases.dates.iter().position(|&d| d == start).expect("start in case range");
    let last = cases.dates.iter().position(|&d| d == end).expect("end in case range");
    let dates: Vec<NaiveDate> = cases.dates[first..=last].to_vec();
    let n = cases.regions.len();
    let t_len = dates.len();

    let counts: Vec<Vec<S>> = cases.counts[first..=last]
        .iter()
        .map(|row| row.iter().map(|&c| S::lit(c as f64)).collect())
        .collect();

    let mut mob = Tensor::zeros(&[t_len, n, n]);
    let day_idx: HashMap<NaiveDate, usize> = dates.iter().enumerate().map(|(i, &d)| (d, i)).collect();
    for (date, flows) in mobility.dates.iter().zip(&mobility.flows) {
        let Some(&t) = day_idx.get(date) else { continue };
        for f in flows {
            let (i, j) = (region_idx[f.src.as_str()], region_idx[f.dst.as_str()]);
            let cur = mob.at(&[t, i, j]);
            mob.set(&[t, i, j], cur + S::lit(f.weight));
        }
    }

    let (case_scale, mobility_scale) = match options.normalize {
        Normalization::None => (vec![S::one(); n], S::one()),
        Normalization::PerRegionMax => {
            let fit = options.scale_days.unwrap_or(t_len).clamp(1, t_len);
            let scale = (0..n)
                .map(|i| {
                    let m = counts[..fit].iter().fold(S::zero(), |m, row| m.max(row[i]));
                    if m > S::zero() {
                        m
                    } else {
                        S::one()
                    }
                })
                .collect();
            let mmax = mob.data()[..fit * n * n].iter().fold(S::zero(), |m, &x| m.max(x));
            (scale, if mmax > S::zero() { mmax } else { S::one() })
        }
    };
    let adjacency_raw = threshold_adjacency(&mob, S::lit(options.epsilon));
    let mobility = mob.map(|x| x / mobility_scale);
    let adjacency = adjacency_raw.map(|x| x / mobility_scale);

    let scaled: Vec<Vec<S>> = counts
        .iter()
        .map(|row| row.iter().zip(&case_scale).map(|(&c, &s)| c / s).collect())
        .collect();
    let features = window_features(&scaled, w);

    Ok(EpidemicDataset {
        regions: cases.regions.clone(),
        dates,
        options,
        features,
        mobility,
        adjacency,
        counts,
        case_scale,
        mobility_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epidata::tables::Flow;

    fn day(k: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 3, 1).unwrap() + chrono::Duration::days(k)
    }

    fn single_region(counts: &[u64]) -> (CaseTable, MobilityTable) {
        let dates: Vec<_> = (0..counts.len() as i64).map(day).collect();
        let cases = CaseTable {
            dates: dates.clone(),
            regions: vec!["A".into()],
            counts: counts.iter().map(|&c| vec![c]).collect(),
        };
        let mobility = MobilityTable {
            flows: vec![Vec::new(); dates.len()],
            dates,
        };
        (cases, mobility)
    }

    #[test]
    fn window_definition_and_padding() {
        let (c, m) = single_region(&[1, 2, 3]);
        let ds: EpidemicDataset<f64> = build_dataset(&c, &m, DatasetOptions::default()).unwrap();
        assert_eq!(ds.features_at(2).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(ds.features_at(0).data(), &[0.0, 0.0, 1.0]);
        assert_eq!(ds.features_at(1).data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn shapes_for_five_regions_ten_days() {
        let regions: Vec<String> = (0..5).map(|i| format!("R{i}")).collect();
        let dates: Vec<_> = (0..10).map(day).collect();
        let cases = CaseTable {
            dates: dates.clone(),
            regions: regions.clone(),
            counts: vec![vec![1; 5]; 10],
        };
        let mobility = MobilityTable {
            flows: dates
                .iter()
                .map(|_| {
                    vec![Flow {
                        src: "R0".into(),
                        dst: "R1".into(),
                        weight: 2.5,
                    }]
                })
                .collect(),
            dates,
        };
        let ds: EpidemicDataset<f64> = build_dataset(&cases, &mobility, DatasetOptions::default()).unwrap();
        assert_eq!(ds.features.shape(), &[10, 5, 3]);
        assert_eq!(ds.mobility.shape(), &[10, 5, 5]);
        assert_eq!(ds.adjacency.at(&[4, 0, 1]), 2.5);
        assert_eq!(ds.adjacency.at(&[4, 1, 0]), 0.0);
    }

    #[test]
    fn epsilon_threshold_drops_small_flows() {
        let (mut c, _) = single_region(&[1, 1]);
        c.regions = vec!["A".into()];
        let mut c2 = c.clone();
        c2.regions.push("B".into());
        c2.counts = vec![vec![1, 1]; 2];
        let m = MobilityTable {
            dates: c2.dates.clone(),
            flows: vec![
                vec![
                    Flow { src: "A".into(), dst: "B".into(), weight: 0.01 },
                    Flow { src: "B".into(), dst: "A".into(), weight: 5.0 },
                ];
                2
            ],
        };
        let opts = DatasetOptions {
            epsilon: 0.1,
            ..Default::default()
        };
        let ds: EpidemicDataset<f64> = build_dataset(&c2, &m, opts).unwrap();
        assert_eq!(ds.mobility.at(&[0, 0, 1]), 0.01);
        assert_eq!(ds.adjacency.at(&[0, 0, 1]), 0.0);
        assert_eq!(ds.adjacency.at(&[0, 1, 0]), 5.0);
    }

    #[test]
    fn overlap_and_region_errors() {
        let (c, mut m) = single_region(&[1, 2]);
        m.dates = vec![day(10)];
        m.flows = vec![vec![]];
        assert!(matches!(build_dataset::<f64>(&c, &m, DatasetOptions::default()), Err(DataError::EmptyOverlap)));
        let (c, mut m) = single_region(&[1, 2]);
        m.flows[0].push(Flow {
            src: "A".into(),
            dst: "Z".into(),
            weight: 1.0,
        });
        assert!(matches!(
            build_dataset::<f64>(&c, &m, DatasetOptions::default()),
            Err(DataError::RegionMismatch(r)) if r == "Z"
        ));
    }

    #[test]
    fn overlap_trims_to_common_dates() {
        let (c, mut m) = single_region(&[1, 2, 3, 4]);
        m.dates = vec![day(1), day(2), day(7)];
        m.flows = vec![vec![]; 3];
        let ds: EpidemicDataset<f64> = build_dataset(&c, &m, DatasetOptions::default()).unwrap();
        assert_eq!(ds.dates, vec![day(1), day(2), day(3)]);
        assert_eq!(ds.features_at(0).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn per_region_max_scaling() {
        let (c, m) = single_region(&[2, 4, 8]);
        let opts = DatasetOptions {
            normalize: Normalization::PerRegionMax,
            ..Default::default()
        };
        let ds: EpidemicDataset<f64> = build_dataset(&c, &m, opts).unwrap();
        assert_eq!(ds.case_scale, vec![8.0]);
        assert_eq!(ds.features_at(2).data(), &[0.25, 0.5, 1.0]);
        assert_eq!(ds.counts[2][0], 8.0);
        let early: EpidemicDataset<f64> = build_dataset(
            &c,
            &m,
            DatasetOptions {
                scale_days: Some(2),
                ..opts
            },
        )
        .unwrap();
        assert_eq!(early.case_scale, vec![4.0]);
        assert_eq!(early.features_at(2).data(), &[0.5, 1.0, 2.0]);
    }
}
