use std::sync::OnceLock;

use mmtta_core::harness::run::evaluate_adapted;
use mmtta_core::harness::sweep::{sweep_ablation, AblationGroup};
use mmtta_core::harness::{adapt, pretrain, sweep_lr, ExperimentConfig};
use mmtta_core::model::MultiModalModel;
use mmtta_core::synth::{generate, Dataset, Domain, ScenarioSpec};
use mmtta_core::tta::Method;
use mmtta_core::Error;

struct Small {
    config: ExperimentConfig,
    model: MultiModalModel,
    target: Dataset,
}

/// A short scenario and a one-epoch source model, shared by the fast tests.
fn small() -> &'static Small {
    static SMALL: OnceLock<Small> = OnceLock::new();
    SMALL.get_or_init(|| {
        let config = ExperimentConfig {
            pretrain_epochs: 1,
            ..Default::default()
        };
        let spec = ScenarioSpec {
            source_frames: 20,
            target_frames: 8,
            ..config.scenario_spec().unwrap()
        };
        let source = generate(&spec, Domain::Source).unwrap();
        let (a, b, _) = pretrain(&config, &source).unwrap();
        Small {
            config,
            model: MultiModalModel::new(&a, &b).unwrap(),
            target: generate(&spec, Domain::Target).unwrap(),
        }
    })
}

#[test]
fn empty_target_leaves_the_source_model() {
    let s = small();
    let empty = s.target.slice(0..0);
    let mut source_only = s.config.clone();
    source_only.adapt.method = Method::SourceOnly;
    let reference = evaluate_adapted(&s.model, &s.target, &source_only).unwrap();
    for method in [Method::Tent, Method::MmttaSoft, Method::XmudaPl] {
        let mut c = s.config.clone();
        c.adapt.method = method;
        let out = adapt(s.model.clone(), &empty, &c).unwrap();
        assert!(out.steps.is_empty());
        assert_eq!(evaluate_adapted(&out.model, &s.target, &c).unwrap(), reference, "{method}");
    }
}

#[test]
fn every_frame_is_visited_once_and_runs_repeat_exactly() {
    let s = small();
    let a = adapt(s.model.clone(), &s.target, &s.config).unwrap();
    let b = adapt(s.model.clone(), &s.target, &s.config).unwrap();
    assert!(a.visits.iter().all(|&v| v == 1));
    assert_eq!(a.steps.iter().map(|r| r.points).sum::<usize>(), 8 * 256);
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn lambda_one_keeps_slow_statistics_at_source() {
    let s = small();
    let mut c = s.config.clone();
    c.adapt.lambda = 1.0;
    let out = adapt(s.model.clone(), &s.target, &c).unwrap();
    assert_eq!(out.model.branch2d.slow.bn_states(), out.model.branch2d.source.bn_states());
    assert_eq!(out.model.branch3d.slow.bn_states(), out.model.branch3d.source.bn_states());
}

#[test]
fn one_lr_pair_or_repeated_pairs_have_zero_spread() {
    let s = small();
    let one = sweep_lr(&s.config, &s.model, &s.target, &[Method::Tent], &[(0.05, 0.12)]).unwrap();
    assert_eq!(one.summary[0].std, 0.0);
    let twice = sweep_lr(&s.config, &s.model, &s.target, &[Method::MmttaHard], &[(0.05, 0.12), (0.05, 0.12)]).unwrap();
    assert_eq!(twice.summary[0].std, 0.0);
    assert_eq!(twice.runs[0], twice.runs[1]);
    assert!(matches!(
        sweep_lr(&s.config, &s.model, &s.target, &[Method::Tent], &[]),
        Err(Error::Config(_))
    ));
}

#[test]
fn diverging_sweep_runs_are_recorded_not_fatal() {
    let s = small();
    let sweep = sweep_lr(&s.config, &s.model, &s.target, &[Method::Tent], &[(0.05, 0.12), (1e300, 1e300)]).unwrap();
    assert_eq!(sweep.runs[0].diverged_at, None);
    assert!(sweep.runs[1].diverged_at.is_some());
    let mut c = s.config.clone();
    c.adapt.method = Method::Tent;
    c.adapt.lr2d = 1e300;
    assert!(matches!(adapt(s.model.clone(), &s.target, &c), Err(Error::Numeric(_))));
}

#[test]
fn ablation_grid_rows_and_lambda_one_rerun() {
    let s = small();
    let a = sweep_ablation(&s.config, &s.model, &s.target).unwrap();
    let theta_rows = a.iter().filter(|(g, _)| *g == AblationGroup::Theta).count();
    assert_eq!(theta_rows, 8);
    let b = sweep_ablation(&s.config, &s.model, &s.target).unwrap();
    let lambda_one = |rows: &[(AblationGroup, mmtta_core::harness::SweepRun)]| {
        rows.iter()
            .filter(|(g, r)| *g == AblationGroup::Lambda && r.lambda == 1.0)
            .map(|(_, r)| r.clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(lambda_one(&a).len(), 2);
    assert_eq!(lambda_one(&a), lambda_one(&b));
}

#[test]
fn interior_threshold_is_never_worse_than_both_extremes() {
    let config = ExperimentConfig::default();
    let spec = config.scenario_spec().unwrap();
    let source = generate(&spec, Domain::Source).unwrap();
    let target = generate(&spec, Domain::Target).unwrap();
    let (a, b, _) = pretrain(&config, &source).unwrap();
    let model = MultiModalModel::new(&a, &b).unwrap();
    for method in [Method::MmttaHard, Method::MmttaSoft] {
        let score = |theta: f64| {
            let mut c = config.clone();
            c.adapt.method = method;
            c.adapt.theta = theta;
            adapt(model.clone(), &target, &c).unwrap().metrics.scores.miou_ens
        };
        let (lo, hi) = (score(0.1), score(0.7));
        let interior = score(0.3).max(score(0.5));
        assert!(interior >= lo.min(hi), "{method}: interior {interior}, extremes {lo} {hi}");
    }
}

#[test]
fn shuffled_source_labels_train_a_chance_level_model() {
    let config = ExperimentConfig {
        shuffle_labels: true,
        pretrain_epochs: 2,
        ..Default::default()
    };
    let spec = ScenarioSpec {
        source_frames: 60,
        ..config.scenario_spec().unwrap()
    };
    let source = generate(&spec, Domain::Source).unwrap();
    let (_, _, report) = pretrain(&config, &source).unwrap();
    // uniform guessing over six balanced classes gives an mIoU near 1/11
    assert!(report.source_test.miou_ens < 0.2, "{}", report.source_test.miou_ens);
}

#[test]
fn pretraining_is_deterministic() {
    let config = ExperimentConfig {
        pretrain_epochs: 1,
        ..Default::default()
    };
    let spec = ScenarioSpec {
        source_frames: 10,
        ..config.scenario_spec().unwrap()
    };
    let source = generate(&spec, Domain::Source).unwrap();
    let (a1, b1, r1) = pretrain(&config, &source).unwrap();
    let (a2, b2, r2) = pretrain(&config, &source).unwrap();
    assert_eq!((a1, b1), (a2, b2));
    assert_eq!(r1, r2);
}
