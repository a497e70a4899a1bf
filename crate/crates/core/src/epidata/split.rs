use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Lengths of the trailing test block and the validation block right before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_len: usize,
    pub val_len: usize,
}

/// Day index ranges (0-based, half-open) partitioning `0..T` in temporal order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitSpec {
    pub fn new(test_len: usize, val_len: usize) -> Self {
        Self { test_len, val_len }
    }

    pub fn split(&self, n_days: usize) -> Result<DataSplit, DataError> {
        if self.test_len == 0 || self.val_len == 0 || self.test_len + self.val_len >= n_days {
            return Err(DataError::InvalidSplit {
                test_len: self.test_len,
                val_len: self.val_len,
                n_days,
            });
        }
        let test_start = n_days - self.test_len;
        let val_start = test_start - self.val_len;
        Ok(DataSplit {
            train: 0..val_start,
            val: val_start..test_start,
            test: test_start..n_days,
        })
    }
}

pub fn split_dataset<S: crate::Scalar>(
    ds: &super::EpidemicDataset<S>,
    spec: SplitSpec,
) -> Result<DataSplit, DataError> {
    spec.split(ds.n_days())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn boundary_is_invalid() {
        assert!(SplitSpec::new(3, 3).split(6).is_err());
        assert!(SplitSpec::new(0, 3).split(60).is_err());
        assert!(SplitSpec::new(3, 3).split(7).is_ok());
    }

    proptest! {
        #[test]
        fn ranges_partition_all_days(t in 3usize..200, test in 1usize..50, val in 1usize..50) {
            let spec = SplitSpec::new(test, val);
            match spec.split(t) {
                Ok(s) => {
                    prop_assert_eq!(s.train.start, 0);
                    prop_assert_eq!(s.train.end, s.val.start);
                    prop_assert_eq!(s.val.end, s.test.start);
                    prop_assert_eq!(s.test.end, t);
                    prop_assert_eq!(s.test.len(), test);
                    prop_assert_eq!(s.val.len(), val);
                    prop_assert!(!s.train.is_empty());
                }
                Err(_) => prop_assert!(test + val >= t),
            }
        }
    }
}
