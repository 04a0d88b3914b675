//! One adaptation step: forward passes, pseudo labels, gradient step on the
//! fast affine parameters and the slow-model momentum update.

use crate::batchnorm::BnMode;
use crate::error::{Error, Result};
use crate::model::{fuse_slow_fast, momentum_update, Modality, MultiModalModel};
use crate::tape::GradTape;
use crate::tensor::{softmax_rows, Scalar, Tensor};
use crate::tta::config::{AdaptationConfig, Method};
use crate::tta::losses::{
    consistency_loss, ensemble_entropy_loss, entropy_loss, mmtta_loss, mmtta_loss_fused,
    pseudo_label_loss, LossTerm,
};
use crate::tta::pseudo::{
    ablation_entropy_select, ablation_fuse, confidences, consistency_measure, inter_pr_hard,
    inter_pr_soft, threshold_pseudo_labels, FuseVariant, PseudoLabelSet,
};

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Value of the objective before the update (0 when skipped).
    pub loss: f64,
    /// Individual objective terms by name.
    pub terms: Vec<(&'static str, f64)>,
    /// Fraction of points carrying a valid pseudo label, pooled over the
    /// label sets the method uses. `None` for label-free objectives.
    pub valid_fraction: Option<f64>,
    /// Valid pseudo labels that match the ground truth, when it was supplied.
    pub pseudo_correct: usize,
    pub pseudo_valid: usize,
    /// No valid pseudo label, so no gradient step was taken.
    pub skipped: bool,
}

/// Slow/fast fused probabilities and their argmax labels for both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraPg<T: Scalar = f32> {
    pub p2d_fused: Tensor<T>,
    pub p3d_fused: Tensor<T>,
    pub y2d: Vec<usize>,
    pub y3d: Vec<usize>,
}

fn fuse_pair<T: Scalar>(p_slow: [&Tensor<T>; 2], p_fast: [&Tensor<T>; 2]) -> Result<IntraPg<T>> {
    let p2d_fused = fuse_slow_fast(p_slow[0], p_fast[0])?;
    let p3d_fused = fuse_slow_fast(p_slow[1], p_fast[1])?;
    Ok(IntraPg {
        y2d: p2d_fused.argmax_rows(),
        y3d: p3d_fused.argmax_rows(),
        p2d_fused,
        p3d_fused,
    })
}

/// Runs the fast (batch statistics) and slow (stored statistics) copies of
/// both branches and fuses them per modality. The fast statistics are
/// replaced by those of this batch.
pub fn intra_pg<T: Scalar>(
    model: &mut MultiModalModel<T>,
    x2d: &Tensor<T>,
    x3d: &Tensor<T>,
) -> Result<IntraPg<T>> {
    let f2 = model.branch2d.fast.predict(x2d)?;
    let f3 = model.branch3d.fast.predict(x3d)?;
    let s2 = model.branch2d.slow.predict(x2d)?;
    let s3 = model.branch3d.slow.predict(x3d)?;
    fuse_pair([&s2, &s3], [&f2, &f3])
}

struct Forward<T: Scalar> {
    tapes: [GradTape<T>; 2],
    logits: [Tensor<T>; 2],
    fast: [Tensor<T>; 2],
    slow: Option<[Tensor<T>; 2]>,
}

fn forward<T: Scalar>(
    model: &mut MultiModalModel<T>,
    inputs: [&Tensor<T>; 2],
    config: &AdaptationConfig,
) -> Result<Forward<T>> {
    let mut tapes = [
        GradTape::with_stats_gradient(config.stats_gradient),
        GradTape::with_stats_gradient(config.stats_gradient),
    ];
    let mut logits = Vec::with_capacity(2);
    for ((m, x), tape) in Modality::BOTH.into_iter().zip(inputs).zip(tapes.iter_mut()) {
        let fast = &mut model.branch_mut(m).fast;
        logits.push(fast.logits_taped(x, BnMode::BatchStats, tape, false)?);
    }
    let logits: [Tensor<T>; 2] = [logits[0].clone(), logits[1].clone()];
    let fast = [softmax_rows(&logits[0]), softmax_rows(&logits[1])];
    let slow = if config.method.uses_slow_model() {
        Some([
            model.branch2d.slow.predict(inputs[0])?,
            model.branch3d.slow.predict(inputs[1])?,
        ])
    } else {
        None
    };
    Ok(Forward {
        tapes,
        logits,
        fast,
        slow,
    })
}

struct Objective<T: Scalar> {
    term: Option<LossTerm<T>>,
    names: Vec<(&'static str, f64)>,
    labels: Vec<PseudoLabelSet>,
}

impl<T: Scalar> Objective<T> {
    fn new() -> Self {
        Self {
            term: None,
            names: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn push(&mut self, name: &'static str, term: Option<LossTerm<T>>) -> Result<()> {
        let Some(term) = term else {
            return Ok(());
        };
        self.names.push((name, term.value.to_f64().unwrap_or(f64::NAN)));
        match &mut self.term {
            Some(total) => total.add(&term)?,
            None => self.term = Some(term),
        }
        Ok(())
    }
}

fn require_slow<T: Scalar>(f: &Forward<T>) -> Result<&[Tensor<T>; 2]> {
    f.slow
        .as_ref()
        .ok_or_else(|| Error::Config("method needs the slow model".into()))
}

fn refined_loss<T: Scalar>(
    f: &Forward<T>,
    ens: &PseudoLabelSet,
    config: &AdaptationConfig,
) -> Result<Option<LossTerm<T>>> {
    match (&f.slow, config.score_fused) {
        (Some(slow), true) => mmtta_loss_fused(&f.fast[0], &slow[0], &f.fast[1], &slow[1], ens),
        _ => mmtta_loss(&f.fast[0], &f.fast[1], ens),
    }
}

fn objective<T: Scalar>(
    f: &Forward<T>,
    truth: Option<&[usize]>,
    config: &AdaptationConfig,
) -> Result<Objective<T>> {
    let mut obj = Objective::new();
    let (p2d, p3d) = (&f.fast[0], &f.fast[1]);
    let theta = config.theta;
    match config.method {
        Method::SourceOnly => {}
        Method::Tent => obj.push("entropy", Some(entropy_loss(p2d, p3d)?))?,
        Method::TentEns => {
            obj.push("ens_entropy", Some(ensemble_entropy_loss(&f.logits[0], &f.logits[1])?))?
        }
        Method::Xmuda | Method::XmudaTent | Method::XmudaTentEns | Method::XmudaPl | Method::XmudaPlTentEns => {
            obj.push("consistency", Some(consistency_loss(p2d, p3d)?))?;
            if config.method == Method::XmudaTent {
                obj.push("entropy", Some(entropy_loss(p2d, p3d)?))?;
            }
            if matches!(config.method, Method::XmudaPl | Method::XmudaPlTentEns) {
                let y2d = threshold_pseudo_labels(p2d, theta)?;
                let y3d = threshold_pseudo_labels(p3d, theta)?;
                obj.push("pseudo_label", pseudo_label_loss(p2d, p3d, &y2d, &y3d)?)?;
                obj.labels = vec![y2d, y3d];
            }
            if matches!(config.method, Method::XmudaTentEns | Method::XmudaPlTentEns) {
                obj.push("ens_entropy", Some(ensemble_entropy_loss(&f.logits[0], &f.logits[1])?))?;
            }
        }
        Method::OracleTta => {
            let truth = truth.ok_or_else(|| Error::Config("oracle_tta needs ground-truth labels".into()))?;
            if truth.len() != p2d.rows() {
                return Err(Error::dim("oracle_tta labels", p2d.rows(), truth.len()));
            }
            let set = PseudoLabelSet::all_valid(truth.to_vec());
            obj.push("cross_entropy", mmtta_loss(p2d, p3d, &set)?)?;
            obj.labels = vec![set];
        }
        Method::PlFast => {
            let y2d = PseudoLabelSet::all_valid(p2d.argmax_rows());
            let y3d = PseudoLabelSet::all_valid(p3d.argmax_rows());
            obj.push("pseudo_label", pseudo_label_loss(p2d, p3d, &y2d, &y3d)?)?;
            obj.labels = vec![y2d, y3d];
        }
        Method::PlIntra => {
            let slow = require_slow(f)?;
            let intra = fuse_pair([&slow[0], &slow[1]], [p2d, p3d])?;
            let y2d = PseudoLabelSet::all_valid(intra.y2d);
            let y3d = PseudoLabelSet::all_valid(intra.y3d);
            obj.push("pseudo_label", pseudo_label_loss(p2d, p3d, &y2d, &y3d)?)?;
            obj.labels = vec![y2d, y3d];
        }
        Method::MergeFastThr => {
            let mut set = ablation_fuse(&p2d.argmax_rows(), &p3d.argmax_rows(), p2d, p3d, FuseVariant::Merge)?;
            let merged = fuse_slow_fast(p2d, p3d)?;
            set.restrict(&confidences(&merged), theta)?;
            obj.push("pseudo_label", refined_loss(f, &set, config)?)?;
            obj.labels = vec![set];
        }
        Method::MmttaHard
        | Method::MmttaSoft
        | Method::Consensus
        | Method::ConsensusThr
        | Method::MergeThr
        | Method::EntropySelect => {
            let slow = require_slow(f)?;
            let intra = fuse_pair([&slow[0], &slow[1]], [p2d, p3d])?;
            let (f2, f3) = (&intra.p2d_fused, &intra.p3d_fused);
            let set = match config.method {
                Method::MmttaHard | Method::MmttaSoft => {
                    let z2 = consistency_measure(&slow[0], p2d, config.epsilon)?;
                    let z3 = consistency_measure(&slow[1], p3d, config.epsilon)?;
                    if config.method == Method::MmttaHard {
                        inter_pr_hard(&intra.y2d, &intra.y3d, &z2, &z3, theta)?
                    } else {
                        inter_pr_soft(f2, f3, &z2, &z3, theta)?
                    }
                }
                Method::Consensus | Method::ConsensusThr => {
                    let mut set = ablation_fuse(&intra.y2d, &intra.y3d, f2, f3, FuseVariant::Consensus)?;
                    if config.method == Method::ConsensusThr {
                        let scores: Vec<f64> = confidences(f2)
                            .iter()
                            .zip(confidences(f3))
                            .map(|(a, b)| (a + b) / 2.0)
                            .collect();
                        set.restrict(&scores, theta)?;
                    }
                    set
                }
                Method::MergeThr => {
                    let mut set = ablation_fuse(&intra.y2d, &intra.y3d, f2, f3, FuseVariant::Merge)?;
                    set.restrict(&confidences(&fuse_slow_fast(f2, f3)?), theta)?;
                    set
                }
                _ => {
                    let (mut set, picks_2d) = ablation_entropy_select(f2, f3, &intra.y2d, &intra.y3d)?;
                    let (c2, c3) = (confidences(f2), confidences(f3));
                    let scores: Vec<f64> = picks_2d
                        .iter()
                        .enumerate()
                        .map(|(i, &two)| if two { c2[i] } else { c3[i] })
                        .collect();
                    set.restrict(&scores, theta)?;
                    set
                }
            };
            obj.push("pseudo_label", refined_loss(f, &set, config)?)?;
            obj.labels = vec![set];
        }
    }
    Ok(obj)
}

/// One adaptation step on a batch. `truth` is only read by `oracle_tta`
/// and for the pseudo-label accuracy counters in the report.
pub fn adapt_step<T: Scalar>(
    model: &mut MultiModalModel<T>,
    x2d: &Tensor<T>,
    x3d: &Tensor<T>,
    truth: Option<&[usize]>,
    config: &AdaptationConfig,
) -> Result<StepReport> {
    config.validate()?;
    if x2d.rows() != x3d.rows() {
        return Err(Error::dim("adapt_step", x2d.rows(), x3d.rows()));
    }
    if !config.method.adapts() {
        return Ok(StepReport {
            loss: 0.0,
            terms: Vec::new(),
            valid_fraction: None,
            pseudo_correct: 0,
            pseudo_valid: 0,
            skipped: false,
        });
    }
    let f = forward(model, [x2d, x3d], config)?;
    let obj = objective(&f, truth, config)?;

    let mut report = StepReport {
        loss: 0.0,
        terms: obj.names.clone(),
        valid_fraction: None,
        pseudo_correct: 0,
        pseudo_valid: 0,
        skipped: config.method.adapts() && obj.term.is_none(),
    };
    if !obj.labels.is_empty() {
        let points: usize = obj.labels.iter().map(PseudoLabelSet::len).sum();
        let valid: usize = obj.labels.iter().map(PseudoLabelSet::valid_count).sum();
        report.valid_fraction = Some(valid as f64 / points.max(1) as f64);
        report.pseudo_valid = valid;
        if let Some(truth) = truth {
            report.pseudo_correct = obj.labels.iter().map(|s| s.agreement(truth).0).sum();
        }
    }

    if let Some(term) = &obj.term {
        let loss = term.value.to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("{} objective is {loss}", config.method)));
        }
        report.loss = loss;
        let lrs = [T::lit(config.lr2d), T::lit(config.lr3d)];
        for (i, (m, grad)) in Modality::BOTH.into_iter().zip([&term.grad2d, &term.grad3d]).enumerate() {
            let grads = f.tapes[i].backward(grad)?;
            if !grads.is_finite() {
                return Err(Error::Numeric(format!("non-finite {} gradient", m.name())));
            }
            model.branch_mut(m).fast.sgd_affine(&grads, lrs[i]);
        }
    }

    if config.method.uses_slow_model() {
        for m in Modality::BOTH {
            let set = model.branch_mut(m);
            for (slow, fast) in set.slow.bn_states_mut().iter_mut().zip(set.fast.bn_states()) {
                *slow = momentum_update(slow, fast, config.lambda)?;
            }
        }
    }
    Ok(report)
}
