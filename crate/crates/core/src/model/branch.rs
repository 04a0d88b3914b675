//! One modality's network: a trunk of `linear → batchnorm → relu` blocks and
//! a linear classifier.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batchnorm::{batchnorm_forward, BnMode, BnState};
use crate::error::{Error, Result};
use crate::rng::standard_normal;
use crate::tape::{GradTape, Gradients};
use crate::tensor::{linear_forward, relu, softmax_rows, Scalar, Tensor};

/// Largest admissible share of trainable scalars.
pub const TRAINABLE_BUDGET: f64 = 0.01;

/// Hidden width of the default trunks. Normalization parameters grow linearly
/// and weights quadratically with width; 320 is the smallest round width that
/// keeps the affine share under one percent for both input widths.
pub const DEFAULT_HIDDEN: usize = 320;
pub const DEFAULT_DEPTH: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_width: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Architecture {
    pub fn new(input_width: usize, hidden: Vec<usize>, classes: usize) -> Result<Self> {
        if input_width == 0 || classes == 0 || hidden.contains(&0) {
            return Err(Error::Config(format!(
                "architecture widths must be positive: input {input_width}, hidden {hidden:?}, classes {classes}"
            )));
        }
        Ok(Self {
            input_width,
            hidden,
            classes,
        })
    }

    pub fn desk_scale(input_width: usize, classes: usize) -> Self {
        Self {
            input_width,
            hidden: vec![DEFAULT_HIDDEN; DEFAULT_DEPTH],
            classes,
        }
    }

    /// Widths from input to logits, e.g. `[16, 320, 320, 320, 6]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_width);
        w.extend_from_slice(&self.hidden);
        w.push(self.classes);
        w
    }

    /// `(trainable, total)`: trainable counts every gamma and beta, total
    /// adds all weights and biases.
    pub fn param_counts(&self) -> (usize, usize) {
        let widths = self.widths();
        let weights: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let affine: usize = self.hidden.iter().map(|h| 2 * h).sum();
        (affine, weights + affine)
    }

    pub fn trainable_ratio(&self) -> f64 {
        let (t, total) = self.param_counts();
        t as f64 / total as f64
    }

    /// Rejects architectures whose affine parameters reach the budget.
    pub fn check_budget(&self, branch: &'static str) -> Result<()> {
        let (trainable, total) = self.param_counts();
        let ratio = trainable as f64 / total as f64;
        if ratio < TRAINABLE_BUDGET {
            return Ok(());
        }
        let depth = self.hidden.len();
        let mut width = self.hidden.iter().copied().max().unwrap_or(1);
        loop {
            let probe = Architecture {
                hidden: vec![width; depth],
                ..self.clone()
            };
            if probe.trainable_ratio() < TRAINABLE_BUDGET {
                break;
            }
            width += 8;
        }
        Err(Error::Budget {
            branch,
            trainable,
            total,
            ratio,
            suggested_width: width,
        })
    }
}

/// Which copy of a branch a network plays during adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Fast,
    Slow,
}

impl Role {
    /// Fast copies normalize with the statistics of the batch they see.
    pub fn bn_mode(self) -> BnMode {
        match self {
            Role::Fast => BnMode::BatchStats,
            Role::Source | Role::Slow => BnMode::StoredStats,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Arc<Tensor<T>>,
    pub bias: Arc<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// He-normal weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let scale = (2.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::lit(standard_normal(rng) * scale))
            .collect();
        Self {
            weight: Arc::new(Tensor::new(fan_in, fan_out, data).expect("sized")),
            bias: Arc::new(Tensor::zeros(1, fan_out)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.data().len() + self.bias.data().len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchNet<T: Scalar = f32> {
    arch: Architecture,
    layers: Vec<Linear<T>>,
    bns: Vec<BnState<T>>,
    role: Role,
}

impl<T: Scalar> BranchNet<T> {
    pub fn init(arch: Architecture, role: Role, rng: &mut impl Rng) -> Self {
        let widths = arch.widths();
        let layers = widths
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        let bns = arch.hidden.iter().map(|&h| BnState::identity(h)).collect();
        Self {
            arch,
            layers,
            bns,
            role,
        }
    }

    pub fn from_parts(
        arch: Architecture,
        layers: Vec<Linear<T>>,
        bns: Vec<BnState<T>>,
        role: Role,
    ) -> Result<Self> {
        let widths = arch.widths();
        if layers.len() != widths.len() - 1 || bns.len() != arch.hidden.len() {
            return Err(Error::dim(
                "BranchNet::from_parts",
                format!("{} layers and {} norms", widths.len() - 1, arch.hidden.len()),
                format!("{} layers and {} norms", layers.len(), bns.len()),
            ));
        }
        for (l, (layer, w)) in layers.iter().zip(widths.windows(2)).enumerate() {
            if layer.weight.shape() != (w[0], w[1]) || layer.bias.shape() != (1, w[1]) {
                return Err(Error::dim(
                    "BranchNet::from_parts",
                    format!("layer {l} of {}x{}", w[0], w[1]),
                    format!("{:?}", layer.weight.shape()),
                ));
            }
        }
        for (bn, &h) in bns.iter().zip(&arch.hidden) {
            if bn.dim() != h {
                return Err(Error::dim("BranchNet::from_parts", h, bn.dim()));
            }
        }
        Ok(Self {
            arch,
            layers,
            bns,
            role,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// A copy sharing this network's weights, playing `role`.
    pub fn with_role(&self, role: Role) -> Self {
        Self {
            role,
            ..self.clone()
        }
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    /// Weights are `Arc`-shared between roles; edit through `Arc::make_mut`.
    pub fn layers_mut(&mut self) -> &mut [Linear<T>] {
        &mut self.layers
    }

    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.bns
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState<T>] {
        &mut self.bns
    }

    /// True when both networks hold bit-identical linear weights.
    pub fn same_weights(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                (Arc::ptr_eq(&a.weight, &b.weight) || a.weight == b.weight)
                    && (Arc::ptr_eq(&a.bias, &b.bias) || a.bias == b.bias)
            })
    }

    pub fn param_counts(&self) -> (usize, usize) {
        self.arch.param_counts()
    }

    /// Logits, using the normalization mode of this network's role.
    pub fn logits(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.logits_with_mode(x, self.role.bn_mode())
    }

    pub fn logits_with_mode(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let depth = self.bns.len();
        let mut h = x.clone();
        for l in 0..depth {
            let layer = &self.layers[l];
            h = linear_forward(&h, &layer.weight, &layer.bias)?;
            h = batchnorm_forward(&h, &mut self.bns[l], mode)?;
            h = relu(&h);
        }
        let head = &self.layers[depth];
        linear_forward(&h, &head.weight, &head.bias)
    }

    /// Logits recorded on `tape`. With `train_weights` the linear layers
    /// are differentiated too (pretraining); otherwise only gamma and beta.
    pub fn logits_taped(
        &mut self,
        x: &Tensor<T>,
        mode: BnMode,
        tape: &mut GradTape<T>,
        train_weights: bool,
    ) -> Result<Tensor<T>> {
        let depth = self.bns.len();
        let mut h = x.clone();
        for l in 0..depth {
            let layer = &self.layers[l];
            h = tape.linear(l, &h, &layer.weight, &layer.bias, train_weights)?;
            h = tape.batchnorm(l, &h, &mut self.bns[l], mode)?;
            h = tape.relu(&h);
        }
        let head = &self.layers[depth];
        tape.linear(depth, &h, &head.weight, &head.bias, train_weights)
    }

    /// Class probabilities.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    /// Plain gradient descent on gamma and beta.
    pub fn sgd_affine(&mut self, grads: &Gradients<T>, lr: T) {
        for (slot, g) in &grads.affine {
            let bn = &mut self.bns[*slot];
            for (p, &d) in bn.gamma_mut().iter_mut().zip(&g.gamma) {
                *p = *p - lr * d;
            }
            for (p, &d) in bn.beta_mut().iter_mut().zip(&g.beta) {
                *p = *p - lr * d;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> BranchNet<U> {
        BranchNet {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: Arc::new(l.weight.cast()),
                    bias: Arc::new(l.bias.cast()),
                })
                .collect(),
            bns: self.bns.iter().map(|b| b.cast()).collect(),
            role: self.role,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(role: Role) -> BranchNet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        BranchNet::init(Architecture::new(4, vec![8, 8], 3).unwrap(), role, &mut rng)
    }

    #[test]
    fn zero_classifier_predicts_uniform() {
        let mut net = small(Role::Fast);
        let head = net.layers_mut().last_mut().unwrap();
        head.weight = Arc::new(Tensor::zeros(8, 3));
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0], [0.0, -1.0, 2.0, 0.5]]);
        let p = net.predict(&x).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stored_stats_prediction_is_deterministic() {
        let mut net = small(Role::Slow);
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0], [0.0, -1.0, 2.0, 0.5]]);
        let a = net.predict(&x).unwrap();
        let b = net.predict(&x).unwrap();
        assert_eq!(a, b);
        // a single row is fine without batch statistics
        assert!(net.predict(&Tensor::from_rows(&[[1.0, 1.0, 1.0, 1.0]])).is_ok());
    }

    #[test]
    fn fast_prediction_matches_layer_by_layer_replay() {
        let mut net = small(Role::Fast);
        let x = Tensor::from_rows(&[
            [1.0, 2.0, 3.0, 4.0],
            [0.0, -1.0, 2.0, 0.5],
            [0.3, 0.1, -2.0, 1.5],
        ]);
        let p = net.predict(&x).unwrap();
        let mut h = x.clone();
        let layers = net.layers().to_vec();
        let mut bns = [BnState::identity(8), BnState::identity(8)];
        for l in 0..2 {
            h = linear_forward(&h, &layers[l].weight, &layers[l].bias).unwrap();
            h = batchnorm_forward(&h, &mut bns[l], BnMode::BatchStats).unwrap();
            h = relu(&h);
        }
        let replay = softmax_rows(&linear_forward(&h, &layers[2].weight, &layers[2].bias).unwrap());
        assert_eq!(p, replay);
        // batch statistics were written back
        assert_eq!(net.bn_states()[0].mu(), bns[0].mu());
    }

    #[test]
    fn width_mismatch_is_a_dimension_error() {
        let mut net = small(Role::Source);
        let x = Tensor::<f64>::zeros(2, 5);
        assert!(matches!(net.predict(&x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn default_architecture_is_within_budget() {
        for width in [16, 12] {
            let arch = Architecture::desk_scale(width, 6);
            let (trainable, total) = arch.param_counts();
            // 3 blocks: 2·320 affine scalars each
            assert_eq!(trainable, 1920);
            assert_eq!(
                total,
                width * 320 + 320 + 2 * (320 * 320 + 320) + 320 * 6 + 6 + 1920
            );
            assert!(arch.check_budget("test").is_ok());
        }
    }

    #[test]
    fn narrow_deep_architecture_is_rejected_with_hint() {
        let arch = Architecture::new(16, vec![4; 6], 6).unwrap();
        match arch.check_budget("2d") {
            Err(Error::Budget {
                suggested_width, ..
            }) => {
                let fixed = Architecture::new(16, vec![suggested_width; 6], 6).unwrap();
                assert!(fixed.check_budget("2d").is_ok());
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn doubling_width_roughly_halves_ratio() {
        let a = Architecture::new(16, vec![320; 3], 6).unwrap();
        let b = Architecture::new(16, vec![640; 3], 6).unwrap();
        let ratio = a.trainable_ratio() / b.trainable_ratio();
        // closed form for f = 16, K = 6: total = 2w² + 31w + 6, affine = 6w
        let closed = |w: f64| 6.0 * w / (2.0 * w * w + 31.0 * w + 6.0);
        let expected = closed(320.0) / closed(640.0);
        assert!((ratio - expected).abs() < 0.05, "{ratio} vs {expected}");
        assert!((ratio - 2.0).abs() < 0.1);
    }
}
