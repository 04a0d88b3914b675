use crate::batchnorm::BnMode;
use crate::error::Result;
use crate::harness::metrics::{ConfusionMatrix, SegmentationScores};
use crate::model::{ensemble_eval, BranchNet};
use crate::synth::Dataset;
use crate::tensor::{softmax_rows, Tensor};

/// Class probabilities of both branches on one frame. Works on copies, so
/// batch-statistics mode leaves the given networks untouched.
pub fn frame_probabilities(
    net2d: &BranchNet,
    net3d: &BranchNet,
    x2d: &Tensor,
    x3d: &Tensor,
    mode: BnMode,
) -> Result<(Tensor, Tensor)> {
    let p2d = softmax_rows(&net2d.clone().logits_with_mode(x2d, mode)?);
    let p3d = softmax_rows(&net3d.clone().logits_with_mode(x3d, mode)?);
    Ok((p2d, p3d))
}

/// 2D, 3D and ensemble IoU over every frame of `data`. With
/// [`BnMode::BatchStats`] each frame is normalized by its own statistics.
pub fn evaluate_pair(
    net2d: &BranchNet,
    net3d: &BranchNet,
    data: &Dataset,
    mode: BnMode,
) -> Result<SegmentationScores> {
    let k = data.classes;
    let (mut c2d, mut c3d, mut cens) = (
        ConfusionMatrix::new(k),
        ConfusionMatrix::new(k),
        ConfusionMatrix::new(k),
    );
    for frame in &data.frames {
        let (p2d, p3d) = frame_probabilities(net2d, net3d, &frame.x2d, &frame.x3d, mode)?;
        c2d.add(&frame.labels, &p2d.argmax_rows())?;
        c3d.add(&frame.labels, &p3d.argmax_rows())?;
        cens.add(&frame.labels, &ensemble_eval(&p2d, &p3d)?.argmax_rows())?;
    }
    Ok(SegmentationScores::from_confusions(&c2d, &c3d, &cens))
}
