//! Self-supervised objectives with gradients with respect to the fast
//! branches' logits.
//!
//! Every loss is a mean over points (over valid points for pseudo-label
//! losses) summed over the two branches. Logarithms are floored at
//! [`PROB_FLOOR`].

use crate::error::{Error, Result};
use crate::tensor::{softmax_backward, softmax_rows, Scalar, Tensor};
use crate::tta::pseudo::PseudoLabelSet;

pub const PROB_FLOOR: f64 = 1e-12;

/// A scalar loss with its gradients with respect to the 2D and 3D logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm<T: Scalar = f32> {
    pub value: T,
    pub grad2d: Tensor<T>,
    pub grad3d: Tensor<T>,
}

impl<T: Scalar> LossTerm<T> {
    pub fn zero(shape: (usize, usize)) -> Self {
        Self {
            value: T::zero(),
            grad2d: Tensor::zeros(shape.0, shape.1),
            grad3d: Tensor::zeros(shape.0, shape.1),
        }
    }

    pub fn add(&mut self, other: &Self) -> Result<()> {
        self.value = self.value + other.value;
        self.grad2d = self.grad2d.zip_map(&other.grad2d, |a, b| a + b)?;
        self.grad3d = self.grad3d.zip_map(&other.grad3d, |a, b| a + b)?;
        Ok(())
    }
}

fn ln_floor<T: Scalar>(p: T) -> T {
    p.max(T::lit(PROB_FLOOR)).ln()
}

/// Shannon entropy of one probability row.
pub fn row_entropy<T: Scalar>(p: &[T]) -> T {
    p.iter().map(|&v| -v * ln_floor(v)).sum()
}

/// `KL(p ‖ q)` of two probability rows.
pub fn row_kl<T: Scalar>(p: &[T], q: &[T]) -> T {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (ln_floor(a) - ln_floor(b)))
        .sum()
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    if a.rows() == 0 {
        return Err(Error::dim(op, "at least one point", 0));
    }
    Ok(())
}

fn entropy_branch<T: Scalar>(p: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let n = T::lit(p.rows() as f64);
    let value = p.iter_rows().map(row_entropy).sum::<T>() / n;
    let grad_p = p.map(|v| -(ln_floor(v) + T::one()) / n);
    Ok((value, softmax_backward(p, &grad_p)?))
}

/// Sum of the per-branch mean prediction entropies.
pub fn entropy_loss<T: Scalar>(p2d: &Tensor<T>, p3d: &Tensor<T>) -> Result<LossTerm<T>> {
    same_shape("entropy_loss", p2d, p3d)?;
    let (v2, g2) = entropy_branch(p2d)?;
    let (v3, g3) = entropy_branch(p3d)?;
    Ok(LossTerm {
        value: v2 + v3,
        grad2d: g2,
        grad3d: g3,
    })
}

/// Mean entropy of the prediction obtained from the averaged 2D and 3D logits.
pub fn ensemble_entropy_loss<T: Scalar>(z2d: &Tensor<T>, z3d: &Tensor<T>) -> Result<LossTerm<T>> {
    same_shape("ensemble_entropy_loss", z2d, z3d)?;
    let half = T::lit(0.5);
    let z = z2d.zip_map(z3d, |a, b| (a + b) * half)?;
    let p = softmax_rows(&z);
    let (value, gz) = entropy_branch(&p)?;
    let g = gz.map(|v| v * half);
    Ok(LossTerm {
        value,
        grad2d: g.clone(),
        grad3d: g,
    })
}

/// Mean symmetric KL divergence between the 2D and 3D predictions.
pub fn consistency_loss<T: Scalar>(p2d: &Tensor<T>, p3d: &Tensor<T>) -> Result<LossTerm<T>> {
    same_shape("consistency_loss", p2d, p3d)?;
    let n = T::lit(p2d.rows() as f64);
    let value = p2d
        .iter_rows()
        .zip(p3d.iter_rows())
        .map(|(a, b)| row_kl(a, b) + row_kl(b, a))
        .sum::<T>()
        / n;
    // d/dz_a [KL(a‖b) + KL(b‖a)] = softmax_backward(a, ln a − ln b + 1) + (a − b)
    let grad_for = |a: &Tensor<T>, b: &Tensor<T>| -> Result<Tensor<T>> {
        let gp = a.zip_map(b, |x, y| (ln_floor(x) - ln_floor(y) + T::one()) / n)?;
        let direct = a.zip_map(b, |x, y| (x - y) / n)?;
        softmax_backward(a, &gp)?.zip_map(&direct, |u, v| u + v)
    };
    Ok(LossTerm {
        value,
        grad2d: grad_for(p2d, p3d)?,
        grad3d: grad_for(p3d, p2d)?,
    })
}

/// Mean cross-entropy over the valid points of `labels`, optionally scored on
/// `(p_slow + p_fast) / 2` with the slow half held constant.
fn cross_entropy_branch<T: Scalar>(
    p_fast: &Tensor<T>,
    p_slow: Option<&Tensor<T>>,
    labels: &PseudoLabelSet,
) -> Result<Option<(T, Tensor<T>)>> {
    if labels.len() != p_fast.rows() {
        return Err(Error::dim("cross_entropy", p_fast.rows(), labels.len()));
    }
    let count = labels.valid_count();
    if count == 0 {
        return Ok(None);
    }
    let n = T::lit(count as f64);
    let half = T::lit(0.5);
    let mut value = T::zero();
    let mut grad = Tensor::zeros(p_fast.rows(), p_fast.cols());
    for i in labels.valid_indices() {
        let y = labels.labels[i];
        if y >= p_fast.cols() {
            return Err(Error::dim("cross_entropy label", p_fast.cols(), y));
        }
        let pf = p_fast.row(i);
        // factor = ∂(−ln p_y)/∂(ln pf_y) so that dz_j = factor·(pf_j − [j = y])
        let (p_y, factor) = match p_slow {
            None => (pf[y], T::one()),
            Some(ps) => {
                let p_y = (ps.get(i, y) + pf[y]) * half;
                (p_y, half * pf[y] / p_y.max(T::lit(PROB_FLOOR)))
            }
        };
        value = value - ln_floor(p_y);
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let target = if j == y { T::one() } else { T::zero() };
            *g = factor * (pf[j] - target) / n;
        }
    }
    Ok(Some((value / n, grad)))
}

/// Per-branch pseudo-label cross-entropy: 2D scored against `y2d`, 3D
/// against `y3d`. `None` when neither set has a valid point.
pub fn pseudo_label_loss<T: Scalar>(
    p2d: &Tensor<T>,
    p3d: &Tensor<T>,
    y2d: &PseudoLabelSet,
    y3d: &PseudoLabelSet,
) -> Result<Option<LossTerm<T>>> {
    same_shape("pseudo_label_loss", p2d, p3d)?;
    let a = cross_entropy_branch(p2d, None, y2d)?;
    let b = cross_entropy_branch(p3d, None, y3d)?;
    Ok(combine(p2d.shape(), a, b))
}

fn combine<T: Scalar>(
    shape: (usize, usize),
    a: Option<(T, Tensor<T>)>,
    b: Option<(T, Tensor<T>)>,
) -> Option<LossTerm<T>> {
    if a.is_none() && b.is_none() {
        return None;
    }
    let mut term = LossTerm::zero(shape);
    if let Some((v, g)) = a {
        term.value = term.value + v;
        term.grad2d = g;
    }
    if let Some((v, g)) = b {
        term.value = term.value + v;
        term.grad3d = g;
    }
    Some(term)
}

/// Both branches scored against one refined label set.
pub fn mmtta_loss<T: Scalar>(
    p2d: &Tensor<T>,
    p3d: &Tensor<T>,
    ens: &PseudoLabelSet,
) -> Result<Option<LossTerm<T>>> {
    pseudo_label_loss(p2d, p3d, ens, ens)
}

/// [`mmtta_loss`] scored on the slow/fast fusion of each branch; gradients
/// reach only the fast halves.
pub fn mmtta_loss_fused<T: Scalar>(
    p2d_fast: &Tensor<T>,
    p2d_slow: &Tensor<T>,
    p3d_fast: &Tensor<T>,
    p3d_slow: &Tensor<T>,
    ens: &PseudoLabelSet,
) -> Result<Option<LossTerm<T>>> {
    same_shape("mmtta_loss_fused", p2d_fast, p3d_fast)?;
    same_shape("mmtta_loss_fused", p2d_fast, p2d_slow)?;
    same_shape("mmtta_loss_fused", p3d_fast, p3d_slow)?;
    let a = cross_entropy_branch(p2d_fast, Some(p2d_slow), ens)?;
    let b = cross_entropy_branch(p3d_fast, Some(p3d_slow), ens)?;
    Ok(combine(p2d_fast.shape(), a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn probs(seed: u64, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
        let mut r = rng::stream(seed, 0);
        let z = Tensor::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng::standard_normal(&mut r) * scale).collect(),
        )
        .unwrap();
        softmax_rows(&z)
    }

    fn one_hot(rows: &[usize], k: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(rows.len(), k);
        for (i, &c) in rows.iter().enumerate() {
            t.set(i, c, 1.0);
        }
        t
    }

    #[test]
    fn entropy_zero_for_one_hot_and_max_for_uniform() {
        let p = one_hot(&[0, 2, 1], 3);
        assert_eq!(entropy_loss(&p, &p).unwrap().value, 0.0);
        let u = Tensor::full(4, 10, 0.1f64);
        let v = entropy_loss(&u, &u).unwrap().value;
        assert!((v - 2.0 * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_matches_direct_summation() {
        let a = probs(1, 6, 4, 2.0);
        let b = probs(2, 6, 4, 2.0);
        let direct: f64 = (0..6)
            .map(|i| {
                let h = |t: &Tensor<f64>| -> f64 {
                    t.row(i).iter().map(|p| -p * p.ln()).sum()
                };
                h(&a) + h(&b)
            })
            .sum::<f64>()
            / 6.0;
        assert!((entropy_loss(&a, &b).unwrap().value - direct).abs() < 1e-12);
    }

    #[test]
    fn consistency_zero_symmetric_and_closed_form() {
        let a = probs(3, 5, 3, 1.0);
        let b = probs(4, 5, 3, 1.0);
        assert!(consistency_loss(&a, &a).unwrap().value.abs() < 1e-15);
        let ab = consistency_loss(&a, &b).unwrap().value;
        let ba = consistency_loss(&b, &a).unwrap().value;
        assert!((ab - ba).abs() < 1e-15);

        let p = Tensor::from_rows(&[[0.9f64, 0.1]]);
        let q = Tensor::from_rows(&[[0.1f64, 0.9]]);
        let v = consistency_loss(&p, &q).unwrap().value;
        assert!((v - 2.0 * 0.8 * 9f64.ln()).abs() < 1e-12);
        assert!((v - 3.5156).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_matches_hand_computation() {
        let p2d = Tensor::from_rows(&[[0.7f64, 0.2, 0.1], [0.1, 0.6, 0.3], [0.2, 0.2, 0.6]]);
        let p3d = Tensor::from_rows(&[[0.5f64, 0.25, 0.25], [0.3, 0.3, 0.4], [0.1, 0.8, 0.1]]);
        let labels = PseudoLabelSet::from_parts(vec![0, 1, 2], vec![true, true, false]);
        let loss = mmtta_loss(&p2d, &p3d, &labels).unwrap().unwrap();
        let expected = -(0.7f64.ln() + 0.6f64.ln()) / 2.0 - (0.5f64.ln() + 0.3f64.ln()) / 2.0;
        assert!((loss.value - expected).abs() < 1e-12);
        // the invalid point gets no gradient
        assert!(loss.grad2d.row(2).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_zero_on_one_hot_and_symmetric_in_branches() {
        let p = one_hot(&[1, 0, 2], 3);
        let labels = PseudoLabelSet::from_parts(vec![1, 0, 2], vec![true; 3]);
        assert_eq!(mmtta_loss(&p, &p, &labels).unwrap().unwrap().value, 0.0);
        let a = probs(5, 3, 3, 1.0);
        let b = probs(6, 3, 3, 1.0);
        let ab = mmtta_loss(&a, &b, &labels).unwrap().unwrap().value;
        let ba = mmtta_loss(&b, &a, &labels).unwrap().unwrap().value;
        assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn no_valid_points_skips() {
        let a = probs(7, 4, 3, 1.0);
        let labels = PseudoLabelSet::from_parts(vec![0; 4], vec![false; 4]);
        assert!(mmtta_loss(&a, &a, &labels).unwrap().is_none());
    }

    #[test]
    fn losses_are_nonnegative() {
        for seed in 0..20 {
            let a = probs(seed, 8, 5, 3.0);
            let b = probs(seed + 100, 8, 5, 3.0);
            let labels = PseudoLabelSet::from_parts(b.argmax_rows(), vec![true; 8]);
            assert!(entropy_loss(&a, &b).unwrap().value >= 0.0);
            assert!(consistency_loss(&a, &b).unwrap().value >= 0.0);
            assert!(mmtta_loss(&a, &b, &labels).unwrap().unwrap().value >= 0.0);
        }
    }

    /// Finite differences on the logits of both branches.
    fn check_logit_grads(
        f: &dyn Fn(&Tensor<f64>, &Tensor<f64>) -> LossTerm<f64>,
        z2d: &Tensor<f64>,
        z3d: &Tensor<f64>,
    ) {
        let term = f(z2d, z3d);
        let h = 1e-6;
        for (which, analytic) in [(0, &term.grad2d), (1, &term.grad3d)] {
            for idx in 0..z2d.data().len() {
                let bump = |d: f64| {
                    let (mut a, mut b) = (z2d.clone(), z3d.clone());
                    if which == 0 {
                        a.data_mut()[idx] += d;
                    } else {
                        b.data_mut()[idx] += d;
                    }
                    f(&a, &b).value
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let a = analytic.data()[idx];
                assert!(
                    (a - numeric).abs() <= 1e-6 * numeric.abs().max(1.0),
                    "branch {which} idx {idx}: {a} vs {numeric}"
                );
            }
        }
    }

    fn logits(seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, 1);
        Tensor::new(5, 4, (0..20).map(|_| rng::standard_normal(&mut r) * 2.0).collect()).unwrap()
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let (z2d, z3d) = (logits(1), logits(2));
        let labels = PseudoLabelSet::from_parts(vec![0, 3, 1, 2, 0], vec![true, true, false, true, true]);
        let other = PseudoLabelSet::from_parts(vec![1, 1, 1, 2, 3], vec![true, false, true, true, true]);
        let slow2d = probs(8, 5, 4, 1.0);
        let slow3d = probs(9, 5, 4, 1.0);
        check_logit_grads(&|a, b| entropy_loss(&softmax_rows(a), &softmax_rows(b)).unwrap(), &z2d, &z3d);
        check_logit_grads(&|a, b| ensemble_entropy_loss(a, b).unwrap(), &z2d, &z3d);
        check_logit_grads(&|a, b| consistency_loss(&softmax_rows(a), &softmax_rows(b)).unwrap(), &z2d, &z3d);
        check_logit_grads(
            &|a, b| {
                pseudo_label_loss(&softmax_rows(a), &softmax_rows(b), &labels, &other)
                    .unwrap()
                    .unwrap()
            },
            &z2d,
            &z3d,
        );
        check_logit_grads(
            &|a, b| {
                mmtta_loss_fused(&softmax_rows(a), &slow2d, &softmax_rows(b), &slow3d, &labels)
                    .unwrap()
                    .unwrap()
            },
            &z2d,
            &z3d,
        );
    }
}
