//! Reverse-mode gradient recording for chains of linear, normalization and
//! ReLU layers.
//!
//! A forward pass pushes one record per primitive onto a [`GradTape`]; the
//! record caches exactly what its backward rule needs. Parameters are
//! addressed by a caller-chosen slot (the layer index inside a branch).
//! Linear layers marked frozen receive no gradient storage at all.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::batchnorm::{normalize, BnMode, BnState};
use crate::error::{Error, Result};
use crate::tensor::{linear_forward, Scalar, Tensor};

#[derive(Debug, Clone)]
enum Record<T: Scalar> {
    Linear {
        slot: usize,
        input: Tensor<T>,
        weight: Arc<Tensor<T>>,
        trainable: bool,
    },
    BatchNorm {
        slot: usize,
        xhat: Tensor<T>,
        sigma: Vec<T>,
        gamma: Vec<T>,
        mode: BnMode,
    },
    Relu {
        mask: Vec<bool>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrad<T: Scalar> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Parameter gradients produced by [`GradTape::backward`], keyed by slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Scalar = f32> {
    pub linear: BTreeMap<usize, LinearGrad<T>>,
    pub affine: BTreeMap<usize, AffineGrad<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn is_finite(&self) -> bool {
        self.linear
            .values()
            .all(|g| g.weight.is_finite() && g.bias.iter().all(|v| v.is_finite()))
            && self
                .affine
                .values()
                .all(|g| g.gamma.iter().chain(&g.beta).all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub struct GradTape<T: Scalar = f32> {
    records: Vec<Record<T>>,
    output_shape: Option<(usize, usize)>,
    stats_gradient: bool,
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    /// A tape that differentiates through batch mean and variance.
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
            output_shape: None,
            stats_gradient: true,
        }
    }

    /// With `false`, batch statistics are treated as constants in the
    /// backward pass.
    pub fn with_stats_gradient(stats_gradient: bool) -> Self {
        Self {
            stats_gradient,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn linear(
        &mut self,
        slot: usize,
        x: &Tensor<T>,
        weight: &Arc<Tensor<T>>,
        bias: &Tensor<T>,
        trainable: bool,
    ) -> Result<Tensor<T>> {
        let out = linear_forward(x, weight, bias)?;
        self.records.push(Record::Linear {
            slot,
            input: x.clone(),
            weight: Arc::clone(weight),
            trainable,
        });
        self.output_shape = Some(out.shape());
        Ok(out)
    }

    pub fn batchnorm(
        &mut self,
        slot: usize,
        x: &Tensor<T>,
        bn: &mut BnState<T>,
        mode: BnMode,
    ) -> Result<Tensor<T>> {
        let (xhat, y) = normalize(x, bn, mode)?;
        self.records.push(Record::BatchNorm {
            slot,
            xhat,
            sigma: bn.sigma().to_vec(),
            gamma: bn.gamma().to_vec(),
            mode,
        });
        self.output_shape = Some(y.shape());
        Ok(y)
    }

    pub fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
        let y = crate::tensor::relu(x);
        self.records.push(Record::Relu { mask });
        self.output_shape = Some(y.shape());
        y
    }

    /// Propagates `grad_output = ∂loss/∂(last output)` back through every
    /// record and returns the parameter gradients.
    pub fn backward(&self, grad_output: &Tensor<T>) -> Result<Gradients<T>> {
        let shape = self.output_shape.ok_or(Error::EmptyTape)?;
        grad_output.expect_shape("backward", shape)?;
        let mut grads = Gradients {
            linear: BTreeMap::new(),
            affine: BTreeMap::new(),
        };
        let mut upstream = grad_output.clone();
        for (idx, record) in self.records.iter().enumerate().rev() {
            let needs_input_grad = idx > 0;
            match record {
                Record::Linear {
                    slot,
                    input,
                    weight,
                    trainable,
                } => {
                    if *trainable {
                        grads.linear.insert(
                            *slot,
                            LinearGrad {
                                weight: input.matmul_tn(&upstream)?,
                                bias: upstream.column_sums(),
                            },
                        );
                    }
                    if needs_input_grad {
                        upstream = upstream.matmul_nt(weight)?;
                    }
                }
                Record::BatchNorm {
                    slot,
                    xhat,
                    sigma,
                    gamma,
                    mode,
                } => {
                    let dgamma = upstream
                        .zip_map(xhat, |g, h| g * h)?
                        .column_sums();
                    let dbeta = upstream.column_sums();
                    if needs_input_grad {
                        upstream = self.bn_input_grad(&upstream, xhat, sigma, gamma, *mode, &dgamma, &dbeta);
                    }
                    grads.affine.insert(
                        *slot,
                        AffineGrad {
                            gamma: dgamma,
                            beta: dbeta,
                        },
                    );
                }
                Record::Relu { mask } => {
                    for (g, &keep) in upstream.data_mut().iter_mut().zip(mask) {
                        if !keep {
                            *g = T::zero();
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_input_grad(
        &self,
        dy: &Tensor<T>,
        xhat: &Tensor<T>,
        sigma: &[T],
        gamma: &[T],
        mode: BnMode,
        dgamma: &[T],
        dbeta: &[T],
    ) -> Tensor<T> {
        let d = sigma.len();
        let n = T::lit(dy.rows() as f64);
        let through_stats = mode == BnMode::BatchStats && self.stats_gradient;
        let mut dx = dy.clone();
        for (i, row) in dx.data_mut().chunks_exact_mut(d.max(1)).enumerate() {
            for j in 0..d {
                let dxhat = row[j] * gamma[j];
                row[j] = if through_stats {
                    // Σ dxhat = γ·Σdy and Σ dxhat·xhat = γ·dγ
                    (dxhat - gamma[j] * (dbeta[j] + xhat.get(i, j) * dgamma[j]) / n) / sigma[j]
                } else {
                    dxhat / sigma[j]
                };
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_on_empty_tape_fails() {
        let tape = GradTape::<f32>::new();
        assert!(matches!(
            tape.backward(&Tensor::zeros(1, 1)),
            Err(Error::EmptyTape)
        ));
    }

    #[test]
    fn gamma_gradient_of_linear_loss_is_column_sum_of_xhat() {
        // loss = sum(gamma * xhat + beta) with stored stats: xhat is fixed.
        let x = Tensor::from_rows(&[[1.0f64, 2.0], [3.0, -1.0], [0.5, 4.0]]);
        let mut bn = BnState::new(vec![1.0, 0.5], vec![2.0, 1.5], vec![1.3, 0.7], vec![0.0, 0.2])
            .unwrap();
        let mut tape = GradTape::new();
        let y = tape.batchnorm(0, &x, &mut bn, BnMode::StoredStats).unwrap();
        let grads = tape.backward(&Tensor::full(y.rows(), y.cols(), 1.0)).unwrap();
        let g = &grads.affine[&0];
        let expected_gamma = [
            (0.0 + 2.0 - 0.5) / 2.0,
            (1.5 - 1.5 + 3.5) / 1.5,
        ];
        for (a, e) in g.gamma.iter().zip(expected_gamma) {
            assert!((a - e).abs() < 1e-12);
        }
        assert_eq!(g.beta, vec![3.0, 3.0]);
    }

    #[test]
    fn beta_gradient_of_output_sum_is_row_count_in_batch_mode() {
        let x = Tensor::from_rows(&[[1.0f64, 2.0], [3.0, -1.0], [0.5, 4.0], [2.0, 2.0]]);
        let mut bn = BnState::identity(2);
        let mut tape = GradTape::new();
        let y = tape.batchnorm(0, &x, &mut bn, BnMode::BatchStats).unwrap();
        let grads = tape.backward(&Tensor::full(y.rows(), y.cols(), 1.0)).unwrap();
        assert_eq!(grads.affine[&0].beta, vec![4.0, 4.0]);
    }

    #[test]
    fn frozen_linear_layers_get_no_gradient_and_stay_unchanged() {
        let x = Tensor::from_rows(&[[1.0f32, -2.0], [0.5, 1.0], [2.0, 0.0]]);
        let w = Arc::new(Tensor::from_rows(&[[0.3f32, -0.2, 0.1], [0.4, 0.5, -0.6]]));
        let b = Tensor::row_vector(&[0.1f32, 0.0, -0.1]);
        let snapshot = (*w).clone();
        let mut bn = BnState::identity(3);
        let mut tape = GradTape::new();
        let h = tape.linear(0, &x, &w, &b, false).unwrap();
        let h = tape.batchnorm(1, &h, &mut bn, BnMode::BatchStats).unwrap();
        let y = tape.relu(&h);
        let grads = tape.backward(&Tensor::full(y.rows(), y.cols(), 1.0)).unwrap();
        assert!(grads.linear.is_empty());
        assert!(grads.affine.contains_key(&1));
        assert_eq!(*w, snapshot);
    }

    #[test]
    fn relu_gradient_masks_nonpositive_inputs() {
        let x = Tensor::from_rows(&[[3.0f64, -3.0, 0.0]]);
        let mut bn = BnState::identity(3);
        let mut tape = GradTape::new();
        let h = tape.batchnorm(0, &x, &mut bn, BnMode::StoredStats).unwrap();
        tape.relu(&h);
        let grads = tape.backward(&Tensor::full(1, 3, 1.0)).unwrap();
        assert_eq!(grads.affine[&0].beta, vec![1.0, 0.0, 0.0]);
    }
}
