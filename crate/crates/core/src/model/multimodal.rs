//! The two-branch model with its source, fast and slow copies.

use crate::batchnorm::BnState;
use crate::error::{Error, Result};
use crate::model::branch::{BranchNet, Role};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    TwoD,
    ThreeD,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::TwoD, Modality::ThreeD];

    pub fn name(self) -> &'static str {
        match self {
            Modality::TwoD => "2d",
            Modality::ThreeD => "3d",
        }
    }
}

/// Source, fast and slow copies of one branch. All three share the linear
/// weights; only their normalization states differ.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSet<T: Scalar = f32> {
    pub source: BranchNet<T>,
    pub fast: BranchNet<T>,
    pub slow: BranchNet<T>,
}

impl<T: Scalar> BranchSet<T> {
    pub fn from_source(net: &BranchNet<T>) -> Self {
        Self {
            source: net.with_role(Role::Source),
            fast: net.with_role(Role::Fast),
            slow: net.with_role(Role::Slow),
        }
    }

    pub fn get(&self, role: Role) -> &BranchNet<T> {
        match role {
            Role::Source => &self.source,
            Role::Fast => &self.fast,
            Role::Slow => &self.slow,
        }
    }

    pub fn get_mut(&mut self, role: Role) -> &mut BranchNet<T> {
        match role {
            Role::Source => &mut self.source,
            Role::Fast => &mut self.fast,
            Role::Slow => &mut self.slow,
        }
    }

    pub fn trunks_identical(&self) -> bool {
        self.source.same_weights(&self.fast) && self.source.same_weights(&self.slow)
    }

    /// Converts all three roles, keeping the weights shared between them.
    pub fn cast<U: Scalar>(&self) -> BranchSet<U> {
        let source = self.source.cast::<U>();
        let mut fast = source.with_role(Role::Fast);
        let mut slow = source.with_role(Role::Slow);
        for (dst, src) in fast.bn_states_mut().iter_mut().zip(self.fast.bn_states()) {
            *dst = src.cast();
        }
        for (dst, src) in slow.bn_states_mut().iter_mut().zip(self.slow.bn_states()) {
            *dst = src.cast();
        }
        BranchSet { source, fast, slow }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalModel<T: Scalar = f32> {
    pub branch2d: BranchSet<T>,
    pub branch3d: BranchSet<T>,
    classes: usize,
}

impl<T: Scalar> MultiModalModel<T> {
    /// Builds the three roles of each branch from source-trained networks.
    /// The slow copies start from the source statistics.
    pub fn new(source2d: &BranchNet<T>, source3d: &BranchNet<T>) -> Result<Self> {
        let classes = source2d.architecture().classes;
        if source3d.architecture().classes != classes {
            return Err(Error::dim(
                "MultiModalModel::new",
                format!("{classes} classes"),
                source3d.architecture().classes,
            ));
        }
        source2d.architecture().check_budget("2d")?;
        source3d.architecture().check_budget("3d")?;
        Ok(Self {
            branch2d: BranchSet::from_source(source2d),
            branch3d: BranchSet::from_source(source3d),
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn branch(&self, modality: Modality) -> &BranchSet<T> {
        match modality {
            Modality::TwoD => &self.branch2d,
            Modality::ThreeD => &self.branch3d,
        }
    }

    pub fn branch_mut(&mut self, modality: Modality) -> &mut BranchSet<T> {
        match modality {
            Modality::TwoD => &mut self.branch2d,
            Modality::ThreeD => &mut self.branch3d,
        }
    }

    pub fn cast<U: Scalar>(&self) -> MultiModalModel<U> {
        MultiModalModel {
            branch2d: self.branch2d.cast(),
            branch3d: self.branch3d.cast(),
            classes: self.classes,
        }
    }

    /// Drops all adaptation state, returning fast and slow to the source.
    pub fn reset(&mut self) {
        for m in Modality::BOTH {
            let set = self.branch_mut(m);
            *set = BranchSet::from_source(&set.source);
        }
    }
}

/// `c_slow' = (1 − λ)·c_fast + λ·c_slow` for every component of the state.
pub fn momentum_update<T: Scalar>(
    slow: &BnState<T>,
    fast: &BnState<T>,
    lambda: f64,
) -> Result<BnState<T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("momentum {lambda} outside [0, 1]")));
    }
    if slow.dim() != fast.dim() {
        return Err(Error::dim("momentum_update", slow.dim(), fast.dim()));
    }
    let keep = T::lit(lambda);
    let take = T::lit(1.0 - lambda);
    let mut out = slow.clone();
    for (dst, src) in out.components_mut().into_iter().zip(fast.components()) {
        for (s, &f) in dst.iter_mut().zip(src) {
            *s = take * f + keep * *s;
        }
    }
    Ok(out)
}

fn mean_of<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let half = T::lit(0.5);
    a.zip_map(b, |x, y| (x + y) * half)
}

/// Mean of slow and fast probabilities for one modality.
pub fn fuse_slow_fast<T: Scalar>(p_slow: &Tensor<T>, p_fast: &Tensor<T>) -> Result<Tensor<T>> {
    mean_of("fuse_slow_fast", p_slow, p_fast)
}

/// Mean of the 2D and 3D probabilities ("softmax average").
pub fn ensemble_eval<T: Scalar>(p2d: &Tensor<T>, p3d: &Tensor<T>) -> Result<Tensor<T>> {
    mean_of("ensemble_eval", p2d, p3d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetLine {
    pub trainable: usize,
    pub total: usize,
    pub ratio: f64,
}

impl BudgetLine {
    fn new(trainable: usize, total: usize) -> Self {
        Self {
            trainable,
            total,
            ratio: trainable as f64 / total as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetReport {
    pub branch2d: BudgetLine,
    pub branch3d: BudgetLine,
    pub overall: BudgetLine,
}

pub fn parameter_budget<T: Scalar>(model: &MultiModalModel<T>) -> BudgetReport {
    let (t2, n2) = model.branch2d.source.param_counts();
    let (t3, n3) = model.branch3d.source.param_counts();
    BudgetReport {
        branch2d: BudgetLine::new(t2, n2),
        branch3d: BudgetLine::new(t3, n3),
        overall: BudgetLine::new(t2 + t3, n2 + n3),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::branch::Architecture;
    use crate::rng;

    fn state(v: f64) -> BnState<f64> {
        BnState::new(vec![v, v], vec![v.abs() + 0.5; 2], vec![1.0 + v; 2], vec![-v; 2]).unwrap()
    }

    #[test]
    fn lambda_one_keeps_slow() {
        let slow = state(1.0);
        let out = momentum_update(&slow, &state(5.0), 1.0).unwrap();
        assert_eq!(out, slow);
    }

    #[test]
    fn lambda_zero_copies_fast() {
        let fast = state(5.0);
        assert_eq!(momentum_update(&state(1.0), &fast, 0.0).unwrap(), fast);
    }

    #[test]
    fn default_momentum_arithmetic() {
        let slow = BnState::new(vec![1.0f64], vec![1.0], vec![1.0], vec![0.0]).unwrap();
        let fast = BnState::new(vec![2.0f64], vec![1.0], vec![1.0], vec![0.0]).unwrap();
        let out = momentum_update(&slow, &fast, 0.99).unwrap();
        assert!((out.mu()[0] - 1.01).abs() < 1e-12);
    }

    #[test]
    fn momentum_rejects_bad_lambda_and_lengths() {
        assert!(matches!(
            momentum_update(&state(1.0), &state(2.0), 1.5),
            Err(Error::Config(_))
        ));
        assert!(momentum_update(&state(1.0), &BnState::identity(3), 0.5).is_err());
    }

    #[test]
    fn slow_state_contracts_geometrically() {
        let fast = state(3.0);
        let mut slow = state(-1.0);
        let lambda: f64 = 0.9;
        let gap0 = slow.max_abs_diff(&fast);
        let bound = ((1e-3 / gap0).ln() / lambda.ln()).ceil() as usize;
        for _ in 0..bound {
            slow = momentum_update(&slow, &fast, lambda).unwrap();
        }
        assert!(slow.max_abs_diff(&fast) < 1e-3);
    }

    #[test]
    fn fusion_is_the_mean() {
        let a = Tensor::from_rows(&[[1.0f32, 0.0]]);
        let b = Tensor::from_rows(&[[0.0f32, 1.0]]);
        assert_eq!(fuse_slow_fast(&a, &b).unwrap().data(), &[0.5, 0.5]);
        assert_eq!(fuse_slow_fast(&a, &a).unwrap(), a);
        assert_eq!(ensemble_eval(&b, &b).unwrap(), b);
        // the tie resolves to the lower class
        assert_eq!(ensemble_eval(&a, &b).unwrap().argmax_rows(), vec![0]);
        assert!(fuse_slow_fast(&a, &Tensor::zeros(2, 2)).is_err());
    }

    #[test]
    fn fused_random_rows_stay_normalized() {
        let mut r = rng::stream(4, 0);
        let mk = |r: &mut rng::Stream| {
            let logits = Tensor::new(
                8,
                5,
                (0..40).map(|_| rng::standard_normal(r) * 3.0).collect::<Vec<f64>>(),
            )
            .unwrap();
            crate::tensor::softmax_rows(&logits)
        };
        let (a, b) = (mk(&mut r), mk(&mut r));
        let fused = fuse_slow_fast(&a, &b).unwrap();
        let ens = ensemble_eval(&a, &b).unwrap();
        for i in 0..8 {
            let s: f64 = fused.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            for j in 0..5 {
                assert!((ens.get(i, j) - (a.get(i, j) + b.get(i, j)) / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn construction_starts_slow_at_source_and_checks_budget() {
        let mut r = rng::stream(0, 0);
        let net2d = BranchNet::<f32>::init(Architecture::desk_scale(16, 6), Role::Source, &mut r);
        let net3d = BranchNet::<f32>::init(Architecture::desk_scale(12, 6), Role::Source, &mut r);
        let model = MultiModalModel::new(&net2d, &net3d).unwrap();
        assert_eq!(model.branch2d.slow.bn_states(), model.branch2d.source.bn_states());
        assert!(model.branch2d.trunks_identical() && model.branch3d.trunks_identical());
        let report = parameter_budget(&model);
        assert!(report.branch2d.ratio < 0.01 && report.branch3d.ratio < 0.01);
        assert!(report.overall.ratio < 0.01);

        let tiny = BranchNet::<f32>::init(
            Architecture::new(16, vec![4; 5], 6).unwrap(),
            Role::Source,
            &mut r,
        );
        assert!(matches!(
            MultiModalModel::new(&tiny, &net3d),
            Err(Error::Budget { .. })
        ));
    }
}
