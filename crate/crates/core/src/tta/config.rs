use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adaptation objective of a run.
///
/// The first block are the published baselines and the proposed method; the
/// `pl_*`, `consensus*`, `merge*` and `entropy_select` variants are the
/// ablation grid (which pseudo-label source, which fusion, with or without
/// ratio thresholding).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// No adaptation; evaluates the source model.
    SourceOnly,
    Tent,
    TentEns,
    Xmuda,
    XmudaTent,
    XmudaTentEns,
    XmudaPl,
    XmudaPlTentEns,
    MmttaHard,
    MmttaSoft,
    OracleTta,
    /// Per-branch argmax labels of the fast model.
    PlFast,
    /// Per-branch argmax labels of the slow/fast fusion.
    PlIntra,
    Consensus,
    ConsensusThr,
    MergeThr,
    /// Merge of fast-only probabilities, thresholded.
    MergeFastThr,
    EntropySelect,
}

impl Method {
    pub const ALL: [Method; 18] = [
        Method::SourceOnly,
        Method::Tent,
        Method::TentEns,
        Method::Xmuda,
        Method::XmudaTent,
        Method::XmudaTentEns,
        Method::XmudaPl,
        Method::XmudaPlTentEns,
        Method::MmttaHard,
        Method::MmttaSoft,
        Method::OracleTta,
        Method::PlFast,
        Method::PlIntra,
        Method::Consensus,
        Method::ConsensusThr,
        Method::MergeThr,
        Method::MergeFastThr,
        Method::EntropySelect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::Tent => "tent",
            Method::TentEns => "tent_ens",
            Method::Xmuda => "xmuda",
            Method::XmudaTent => "xmuda_tent",
            Method::XmudaTentEns => "xmuda_tent_ens",
            Method::XmudaPl => "xmuda_pl",
            Method::XmudaPlTentEns => "xmuda_pl_tent_ens",
            Method::MmttaHard => "mmtta_hard",
            Method::MmttaSoft => "mmtta_soft",
            Method::OracleTta => "oracle_tta",
            Method::PlFast => "pl_fast",
            Method::PlIntra => "pl_intra",
            Method::Consensus => "consensus",
            Method::ConsensusThr => "consensus_thr",
            Method::MergeThr => "merge_thr",
            Method::MergeFastThr => "merge_fast_thr",
            Method::EntropySelect => "entropy_select",
        }
    }

    /// Methods that keep a momentum-updated slow model and evaluate with it.
    /// `oracle_tta` is the slow/fast pipeline with ground truth in place of
    /// the refined pseudo labels.
    pub fn uses_slow_model(self) -> bool {
        matches!(
            self,
            Method::MmttaHard
                | Method::MmttaSoft
                | Method::OracleTta
                | Method::PlIntra
                | Method::Consensus
                | Method::ConsensusThr
                | Method::MergeThr
                | Method::EntropySelect
        )
    }

    pub fn adapts(self) -> bool {
        self != Method::SourceOnly
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub method: Method,
    /// Slow-model momentum.
    pub lambda: f64,
    /// Class-wise keep ratio for pseudo labels.
    pub theta: f64,
    pub lr2d: f64,
    pub lr3d: f64,
    /// Guard added to each KL term of the consistency measure.
    pub epsilon: f64,
    /// Points per adaptation step, cut from the frame stream.
    pub batch_size: usize,
    pub seed: u64,
    /// Differentiate through batch mean and variance.
    pub stats_gradient: bool,
    /// Score the pseudo-label loss on the slow/fast fusion instead of the
    /// fast prediction alone.
    pub score_fused: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            method: Method::MmttaSoft,
            lambda: 0.99,
            theta: 0.3,
            lr2d: 0.05,
            lr3d: 0.12,
            epsilon: 1e-6,
            batch_size: 64,
            seed: 0,
            stats_gradient: true,
            score_fused: false,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Config(format!("theta {} outside (0, 1]", self.theta)));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        for (name, lr) in [("lr2d", self.lr2d), ("lr3d", self.lr3d)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} {lr} must be finite and >= 0")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}
