use slam_core::dataio::{generate_synthetic, Sequence, SyntheticSceneSpec};
use slam_core::pipeline::{run, Mode, PipelineConfig};
use slam_core::sensor::Intrinsics;
use slam_core::SlamError;

fn small_spec(frames: usize, loops: f64) -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        frame_count: frames,
        loops,
        intrinsics: Intrinsics::new(50.0, 50.0, 39.5, 29.5, 80, 60).unwrap(),
        drift_rotation_deg: 0.05,
        drift_translation: 0.001,
        ..SyntheticSceneSpec::default()
    }
}

fn small_config(mode: Mode) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.mode = mode;
    c.mapping_samples = 500;
    c.fusion.surface_samples = 2000;
    c
}

#[test]
fn single_frame_sequence() {
    let syn = generate_synthetic(&small_spec(1, 1.0), 0).unwrap();
    for mode in [Mode::Backend, Mode::Full] {
        let res = run(&small_config(mode), &syn.sequence, None).unwrap();
        assert_eq!(res.state.submaps.len(), 1);
        assert_eq!(res.metrics.n_loop_edges, 0);
        assert_eq!(res.metrics.n_pgo, 0);
        assert_eq!(res.trajectory.len(), 1);
        assert!(res.metrics.f_score.is_none());
    }
}

#[test]
fn motion_below_the_triggers_keeps_one_submap() {
    // a twentieth of a 4 m loop spread over 20 frames
    let syn = generate_synthetic(&small_spec(20, 0.05), 0).unwrap();
    let res = run(&small_config(Mode::Backend), &syn.sequence, None).unwrap();
    assert_eq!(res.state.submaps.len(), 1);
    assert_eq!(res.state.graph.node_count(), 1);
    assert_eq!(res.metrics.n_pgo, 0);
}

#[test]
fn runs_are_repeatable_and_pgo_count_is_bounded() {
    let syn = generate_synthetic(&small_spec(60, 0.5), 2).unwrap();
    let a = run(&small_config(Mode::Backend), &syn.sequence, Some(&syn.gt_surface)).unwrap();
    let b = run(&small_config(Mode::Backend), &syn.sequence, Some(&syn.gt_surface)).unwrap();
    assert!(a.state.submaps.len() >= 2);
    assert!(a.metrics.n_pgo < a.state.submaps.len());
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.metrics, b.metrics);
    assert!(a.metrics.f_score.is_some());
}

#[test]
fn empty_and_incomplete_sequences_are_rejected() {
    let syn = generate_synthetic(&small_spec(5, 0.1), 0).unwrap();
    let empty = Sequence {
        frames: Vec::new(),
        ..syn.sequence.clone()
    };
    assert!(matches!(run(&small_config(Mode::Backend), &empty, None), Err(SlamError::InsufficientData(_))));
    let no_odometry = Sequence {
        odometry: None,
        ..syn.sequence.clone()
    };
    assert!(run(&small_config(Mode::Backend), &no_odometry, None).is_err());
    assert!(run(&small_config(Mode::Full), &no_odometry, None).is_ok());
}
