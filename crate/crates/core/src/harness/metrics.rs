use crate::error::{Error, Result};

/// `counts[truth][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_labels(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        let mut m = Self::new(classes);
        m.add(truth, pred)?;
        Ok(m)
    }

    pub fn add(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::dim("ConfusionMatrix::add", truth.len(), pred.len()));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= self.classes || p >= self.classes {
                return Err(Error::dim("ConfusionMatrix class", self.classes, t.max(p)));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `TP / (TP + FP + FN)` per class; `None` for a class that is neither
    /// present in the truth nor predicted.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..self.classes).map(|p| self.get(k, p)).sum();
                let col: u64 = (0..self.classes).map(|t| self.get(t, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        mean_defined(&self.iou())
    }
}

pub fn mean_defined(values: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

/// Fraction of valid points whose prediction matches the truth; `None` when
/// no point is valid.
pub fn masked_accuracy(pred: &[usize], truth: &[usize], valid: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ((p, t), &v) in pred.iter().zip(truth).zip(valid) {
        if v {
            total += 1;
            hits += usize::from(p == t);
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Per-branch and ensemble segmentation quality.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationScores {
    pub iou2d: Vec<Option<f64>>,
    pub iou3d: Vec<Option<f64>>,
    pub iou_ens: Vec<Option<f64>>,
    pub miou2d: f64,
    pub miou3d: f64,
    pub miou_ens: f64,
}

impl SegmentationScores {
    pub fn from_confusions(c2d: &ConfusionMatrix, c3d: &ConfusionMatrix, cens: &ConfusionMatrix) -> Self {
        Self {
            iou2d: c2d.iou(),
            iou3d: c3d.iou(),
            iou_ens: cens.iou(),
            miou2d: c2d.miou(),
            miou3d: c3d.miou(),
            miou_ens: cens.miou(),
        }
    }
}

/// Segmentation scores plus what the adaptation run logged.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub scores: SegmentationScores,
    /// `(last step of the window, pooled pseudo-label accuracy)`.
    pub pseudo_accuracy: Vec<(usize, Option<f64>)>,
    /// Mean valid-point fraction over steps that use pseudo labels.
    pub valid_fraction: Option<f64>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let y = [0, 1, 2, 2, 1, 0];
        let m = ConfusionMatrix::from_labels(3, &y, &y).unwrap();
        assert!(m.iou().iter().all(|v| *v == Some(1.0)));
        assert_eq!(m.miou(), 1.0);
    }

    #[test]
    fn constant_prediction() {
        let truth = [0, 0, 1, 2, 2, 2, 1, 0];
        let m = ConfusionMatrix::from_labels(3, &truth, &[2; 8]).unwrap();
        let iou = m.iou();
        assert_eq!(iou[2], Some(3.0 / 8.0));
        assert_eq!(iou[0], Some(0.0));
        assert_eq!(iou[1], Some(0.0));
    }

    #[test]
    fn ten_point_fixture_matches_hand_arithmetic() {
        //            truth: 0 0 0 0 1 1 1 2 2 2
        //             pred: 0 0 1 2 1 1 0 2 2 1
        let truth = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2];
        let pred = [0, 0, 1, 2, 1, 1, 0, 2, 2, 1];
        let m = ConfusionMatrix::from_labels(3, &truth, &pred).unwrap();
        // class 0: TP 2, FN 2, FP 1 → 2/5; class 1: TP 2, FN 1, FP 2 → 2/5;
        // class 2: TP 2, FN 1, FP 1 → 2/4
        assert_eq!(m.iou(), vec![Some(0.4), Some(0.4), Some(0.5)]);
        assert!((m.miou() - 1.3 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let m = ConfusionMatrix::from_labels(4, &[0, 1, 1], &[0, 1, 1]).unwrap();
        assert_eq!(m.iou()[2], None);
        assert_eq!(m.miou(), 1.0);
        // predicted but absent from truth still counts, as zero
        let m = ConfusionMatrix::from_labels(4, &[0, 1], &[0, 3]).unwrap();
        assert_eq!(m.iou()[3], Some(0.0));
    }

    #[test]
    fn masked_accuracy_ignores_invalid_points() {
        let truth = [0, 1, 2, 3, 0, 1, 2, 3];
        let pred = [0, 1, 0, 0, 0, 0, 2, 3];
        let valid = [true, true, false, false, true, false, true, false];
        // valid points 0, 1, 4, 6 are all correct
        assert_eq!(masked_accuracy(&pred, &truth, &valid), Some(1.0));
        assert_eq!(masked_accuracy(&pred, &truth, &[false; 8]), None);
        assert_eq!(masked_accuracy(&pred, &truth, &[true; 8]), Some(5.0 / 8.0));
    }

    #[test]
    fn std_of_identical_values_is_zero() {
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
        assert_eq!(mean_std(&[0.5, 0.5]).1, 0.0);
    }
}
