//! Pseudo labels: per-branch thresholding, slow/fast consistency and the
//! 2D/3D selection rules.

use crate::error::{Error, Result};
use crate::tensor::{argmax, Scalar, Tensor};
use crate::tta::losses::{row_entropy, row_kl};

/// Per-point labels with a validity mask and the consistency scores that
/// produced them (zero when the labels did not come from a consistency rule).
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub labels: Vec<usize>,
    pub valid: Vec<bool>,
    pub zeta2d: Vec<f64>,
    pub zeta3d: Vec<f64>,
}

impl PseudoLabelSet {
    pub fn from_parts(labels: Vec<usize>, valid: Vec<bool>) -> Self {
        assert_eq!(labels.len(), valid.len(), "labels and mask differ in length");
        let n = labels.len();
        Self {
            labels,
            valid,
            zeta2d: vec![0.0; n],
            zeta3d: vec![0.0; n],
        }
    }

    /// Every point valid.
    pub fn all_valid(labels: Vec<usize>) -> Self {
        let n = labels.len();
        Self::from_parts(labels, vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.valid_count() as f64 / self.len() as f64
        }
    }

    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| v.then_some(i))
    }

    /// `(correct, valid)` counts against ground truth over valid points.
    pub fn agreement(&self, truth: &[usize]) -> (usize, usize) {
        let correct = self
            .valid_indices()
            .filter(|&i| truth.get(i) == Some(&self.labels[i]))
            .count();
        (correct, self.valid_count())
    }

    /// Applies the class-wise ratio rule on top of the current mask.
    pub fn restrict(&mut self, scores: &[f64], theta: f64) -> Result<()> {
        let keep = ratio_keep(&self.labels, &self.valid, scores, theta)?;
        self.valid = keep;
        Ok(())
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("theta {theta} outside (0, 1]")))
    }
}

/// Class-wise ratio rule: among the currently valid points labelled `k`,
/// keep the `⌈θ·n_k⌉` with the highest score. Ties go to the lower index.
pub fn ratio_keep(labels: &[usize], valid: &[bool], scores: &[f64], theta: f64) -> Result<Vec<bool>> {
    check_theta(theta)?;
    if labels.len() != valid.len() || labels.len() != scores.len() {
        return Err(Error::dim("ratio_keep", labels.len(), scores.len()));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, (&y, &v)) in labels.iter().zip(valid).enumerate() {
        if v {
            by_class[y].push(i);
        }
    }
    let mut keep = vec![false; labels.len()];
    for mut members in by_class {
        // the small slack keeps products such as 0.3 × 10 from rounding up
        let quota = (theta * members.len() as f64 - 1e-9).ceil().max(0.0) as usize;
        members.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        for &i in members.iter().take(quota) {
            keep[i] = true;
        }
    }
    Ok(keep)
}

fn row_max<T: Scalar>(row: &[T]) -> f64 {
    row[argmax(row)].to_f64().unwrap_or(f64::NAN)
}

/// Argmax labels of one branch, thresholded on confidence by the ratio rule.
pub fn threshold_pseudo_labels<T: Scalar>(p: &Tensor<T>, theta: f64) -> Result<PseudoLabelSet> {
    check_theta(theta)?;
    let labels = p.argmax_rows();
    let scores: Vec<f64> = p.iter_rows().map(row_max).collect();
    let mut set = PseudoLabelSet::all_valid(labels);
    set.restrict(&scores, theta)?;
    Ok(set)
}

/// Highest probability of each row.
pub fn confidences<T: Scalar>(p: &Tensor<T>) -> Vec<f64> {
    p.iter_rows().map(row_max).collect()
}

fn rows_f64<T: Scalar>(p: &Tensor<T>, i: usize) -> Vec<f64> {
    p.row(i).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
}

/// Per-point inverse-KL similarity between slow and fast predictions,
/// `ζ = (1/(KL(s‖f)+ε) + 1/(KL(f‖s)+ε)) / 2`, evaluated in double precision.
pub fn consistency_measure<T: Scalar>(
    p_slow: &Tensor<T>,
    p_fast: &Tensor<T>,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if p_slow.shape() != p_fast.shape() {
        return Err(Error::dim(
            "consistency_measure",
            format!("{:?}", p_slow.shape()),
            format!("{:?}", p_fast.shape()),
        ));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon {epsilon} must be positive")));
    }
    Ok((0..p_slow.rows())
        .map(|i| {
            let s = rows_f64(p_slow, i);
            let f = rows_f64(p_fast, i);
            // rounding can push a KL of near-identical rows slightly negative
            let a = row_kl(&s, &f).max(0.0);
            let b = row_kl(&f, &s).max(0.0);
            (1.0 / (a + epsilon) + 1.0 / (b + epsilon)) / 2.0
        })
        .collect())
}

fn check_zetas(n: usize, zeta2d: &[f64], zeta3d: &[f64]) -> Result<()> {
    if zeta2d.len() != n || zeta3d.len() != n {
        return Err(Error::dim("inter_pr", n, zeta2d.len().min(zeta3d.len())));
    }
    if let Some(bad) = zeta2d.iter().chain(zeta3d).find(|z| !(z.is_finite() && **z >= 0.0)) {
        return Err(Error::Numeric(format!("consistency score {bad} is not a finite non-negative value")));
    }
    Ok(())
}

fn max_zeta(zeta2d: &[f64], zeta3d: &[f64]) -> Vec<f64> {
    zeta2d.iter().zip(zeta3d).map(|(a, b)| a.max(*b)).collect()
}

/// Hard selection: each point takes the label of the more consistent
/// modality (2D on ties), then the ratio rule on `max(ζ2d, ζ3d)`.
pub fn inter_pr_hard(
    y2d: &[usize],
    y3d: &[usize],
    zeta2d: &[f64],
    zeta3d: &[f64],
    theta: f64,
) -> Result<PseudoLabelSet> {
    if y2d.len() != y3d.len() {
        return Err(Error::dim("inter_pr_hard", y2d.len(), y3d.len()));
    }
    check_zetas(y2d.len(), zeta2d, zeta3d)?;
    let labels = (0..y2d.len())
        .map(|i| if zeta2d[i] >= zeta3d[i] { y2d[i] } else { y3d[i] })
        .collect();
    let mut set = PseudoLabelSet::all_valid(labels);
    set.zeta2d = zeta2d.to_vec();
    set.zeta3d = zeta3d.to_vec();
    set.restrict(&max_zeta(zeta2d, zeta3d), theta)?;
    Ok(set)
}

/// Consistency-weighted probabilities `ζ*₂·p2d + (1 − ζ*₂)·p3d`; `None` for
/// points where both scores are zero.
pub fn soft_weighted<T: Scalar>(
    p2d: &Tensor<T>,
    p3d: &Tensor<T>,
    zeta2d: &[f64],
    zeta3d: &[f64],
) -> Result<Vec<Option<Vec<f64>>>> {
    if p2d.shape() != p3d.shape() {
        return Err(Error::dim(
            "inter_pr_soft",
            format!("{:?}", p2d.shape()),
            format!("{:?}", p3d.shape()),
        ));
    }
    check_zetas(p2d.rows(), zeta2d, zeta3d)?;
    Ok((0..p2d.rows())
        .map(|i| {
            let total = zeta2d[i] + zeta3d[i];
            if total <= 0.0 {
                return None;
            }
            let w2 = zeta2d[i] / total;
            let w3 = 1.0 - w2;
            Some(
                rows_f64(p2d, i)
                    .iter()
                    .zip(rows_f64(p3d, i))
                    .map(|(a, b)| w2 * a + w3 * b)
                    .collect(),
            )
        })
        .collect())
}

/// Soft selection: argmax of the consistency-weighted mixture, then the ratio
/// rule on `max(ζ2d, ζ3d)`.
pub fn inter_pr_soft<T: Scalar>(
    p2d: &Tensor<T>,
    p3d: &Tensor<T>,
    zeta2d: &[f64],
    zeta3d: &[f64],
    theta: f64,
) -> Result<PseudoLabelSet> {
    check_theta(theta)?;
    let mixed = soft_weighted(p2d, p3d, zeta2d, zeta3d)?;
    let labels = mixed.iter().map(|m| m.as_deref().map_or(0, argmax)).collect();
    let valid = mixed.iter().map(Option::is_some).collect();
    let mut set = PseudoLabelSet::from_parts(labels, valid);
    set.zeta2d = zeta2d.to_vec();
    set.zeta3d = zeta3d.to_vec();
    set.restrict(&max_zeta(zeta2d, zeta3d), theta)?;
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseVariant {
    /// Keep points where both modalities agree.
    Consensus,
    /// Argmax of the mean of the two probabilities.
    Merge,
}

/// Unthresholded consensus or merge labels.
pub fn ablation_fuse<T: Scalar>(
    y2d: &[usize],
    y3d: &[usize],
    p2d: &Tensor<T>,
    p3d: &Tensor<T>,
    variant: FuseVariant,
) -> Result<PseudoLabelSet> {
    if y2d.len() != y3d.len() || p2d.shape() != p3d.shape() || p2d.rows() != y2d.len() {
        return Err(Error::dim("ablation_fuse", y2d.len(), p2d.rows()));
    }
    Ok(match variant {
        FuseVariant::Consensus => {
            let valid = y2d.iter().zip(y3d).map(|(a, b)| a == b).collect();
            PseudoLabelSet::from_parts(y2d.to_vec(), valid)
        }
        FuseVariant::Merge => {
            let labels = (0..p2d.rows())
                .map(|i| {
                    let mean: Vec<f64> = rows_f64(p2d, i)
                        .iter()
                        .zip(rows_f64(p3d, i))
                        .map(|(a, b)| (a + b) / 2.0)
                        .collect();
                    argmax(&mean)
                })
                .collect();
            PseudoLabelSet::all_valid(labels)
        }
    })
}

/// Per point, the label of the modality whose prediction has the lower
/// entropy (2D on ties). Returns the labels and which side won.
pub fn ablation_entropy_select<T: Scalar>(
    p2d: &Tensor<T>,
    p3d: &Tensor<T>,
    y2d: &[usize],
    y3d: &[usize],
) -> Result<(PseudoLabelSet, Vec<bool>)> {
    if y2d.len() != y3d.len() || p2d.shape() != p3d.shape() || p2d.rows() != y2d.len() {
        return Err(Error::dim("ablation_entropy_select", y2d.len(), p2d.rows()));
    }
    let picks_2d: Vec<bool> = p2d
        .iter_rows()
        .zip(p3d.iter_rows())
        .map(|(a, b)| row_entropy(a) <= row_entropy(b))
        .collect();
    let labels = picks_2d
        .iter()
        .enumerate()
        .map(|(i, &two)| if two { y2d[i] } else { y3d[i] })
        .collect();
    Ok((PseudoLabelSet::all_valid(labels), picks_2d))
}
