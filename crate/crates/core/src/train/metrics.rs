use crate::error::{Error, Result};

/// Confusion matrix (rows: reference class, columns: prediction) and the
/// accuracies derived from it. Percentages are in `[0, 100]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    /// Per-class accuracy in percent; NaN for classes without support.
    pub per_class: Vec<f64>,
    pub oa: f64,
    /// Mean of the per-class accuracies over classes with support.
    pub aa: f64,
    pub kappa: f64,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = confusion.len();
        if k == 0 || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::Contract("confusion matrix must be square and non-empty".into()));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Contract("confusion matrix is empty".into()));
        }
        let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let rows: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<u64> = (0..k).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();

        let per_class: Vec<f64> = (0..k)
            .map(|i| {
                if rows[i] == 0 {
                    f64::NAN
                } else {
                    100.0 * confusion[i][i] as f64 / rows[i] as f64
                }
            })
            .collect();
        let supported: Vec<f64> = per_class.iter().copied().filter(|a| !a.is_nan()).collect();
        let aa = supported.iter().sum::<f64>() / supported.len() as f64;
        let oa = 100.0 * trace as f64 / total as f64;

        // κ = (N·trace − Σ rᵢcᵢ) / (N² − Σ rᵢcᵢ), kept in integers until the final division.
        let n = total as u128;
        let chance: u128 = rows.iter().zip(&cols).map(|(&r, &c)| r as u128 * c as u128).sum();
        let denom = n * n - chance;
        let kappa = if denom == 0 {
            1.0
        } else {
            ((n * trace as u128) as i128 - chance as i128) as f64 / denom as f64
        };
        Ok(MetricsReport {
            confusion,
            per_class,
            oa,
            aa,
            kappa,
        })
    }

    /// Builds the confusion matrix from zero-based class indices.
    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::dim("metrics", &[truth.len()], &[predicted.len()]));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::Contract(format!("class index {} out of range 0..{classes}", t.max(p))));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn support(&self) -> Vec<u64> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let r = MetricsReport::from_predictions(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!((r.oa, r.aa, r.kappa), (100.0, 100.0, 1.0));
    }

    #[test]
    fn two_class_hand_oracle() {
        let r = MetricsReport::from_confusion(vec![vec![3, 1], vec![1, 3]]).unwrap();
        assert_eq!(r.oa, 75.0);
        assert_eq!(r.aa, 75.0);
        // p_o = 0.75, p_e = 0.5
        assert_eq!(r.kappa, 0.5);
    }

    #[test]
    fn chance_level_kappa_is_zero() {
        let r = MetricsReport::from_confusion(vec![vec![1, 1], vec![1, 1]]).unwrap();
        assert_eq!(r.kappa, 0.0);
    }

    #[test]
    fn worse_than_chance_is_negative() {
        let r = MetricsReport::from_confusion(vec![vec![0, 2], vec![2, 0]]).unwrap();
        assert_eq!(r.kappa, -1.0);
    }

    #[test]
    fn unsupported_class_excluded_from_aa() {
        let r = MetricsReport::from_confusion(vec![vec![2, 0, 0], vec![0, 0, 0], vec![1, 0, 1]]).unwrap();
        assert!(r.per_class[1].is_nan());
        assert_eq!(r.aa, 75.0);
        assert_eq!(r.support(), vec![2, 0, 2]);
    }

    #[test]
    fn single_class_total_agreement() {
        let r = MetricsReport::from_confusion(vec![vec![5, 0], vec![0, 0]]).unwrap();
        assert_eq!(r.kappa, 1.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(MetricsReport::from_confusion(vec![]).is_err());
        assert!(MetricsReport::from_confusion(vec![vec![0, 0], vec![0, 0]]).is_err());
        assert!(MetricsReport::from_confusion(vec![vec![1, 0]]).is_err());
        assert!(MetricsReport::from_predictions(&[0], &[2], 2).is_err());
    }
}
