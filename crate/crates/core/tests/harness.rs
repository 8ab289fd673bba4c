use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xmreg::autodiff::Tape;
use xmreg::harness::*;
use xmreg::losses::total_loss;
use xmreg::pose::PoseEstimate;
use xmreg::scenegen::{generate_dataset, SceneConfig, SceneSample};
use xmreg::uhmm::FineMatch;
use xmreg::Error;

fn scene_cfg() -> SceneConfig {
    SceneConfig { n_points: 400, height: 16, width: 16, focal: 20.0, ..SceneConfig::default() }
}

fn small(steps: usize) -> TrainConfig {
    TrainConfig { steps, feature_dim: 8, hidden_dim: 16, n_nodes: 32, val_every: 0, ..TrainConfig::default() }
}

fn data(seeds: std::ops::Range<u64>) -> Vec<SceneSample> {
    generate_dataset(&scene_cfg(), &seeds.collect::<Vec<_>>()).unwrap()
}

fn csv(e: &Evaluation) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, &e.scenes).unwrap();
    String::from_utf8(buf).unwrap()
}

/// Mean total loss over `scenes` with fixed noise, independent of any step.
fn fixed_loss(params: &ParamStore, cfg: &TrainConfig, gamma: f64, scenes: &[SceneSample]) -> f64 {
    let mut sum = 0.0;
    for (i, s) in scenes.iter().enumerate() {
        let scene = prepare(s, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let mut t = Tape::new();
        let p = params.bind(&mut t);
        let fwd = forward(&mut t, &p, &scene, cfg, None).unwrap();
        let terms = scene_losses(&mut t, &p, &scene, &fwd, cfg, gamma, &mut rng).unwrap();
        let total = total_loss(&mut t, &terms, &cfg.weights, 0).unwrap();
        sum += t.value(total).item();
    }
    sum / scenes.len() as f64
}

#[test]
fn same_config_and_seed_reproduce_checkpoint_and_metrics() {
    let tr = data(0..8);
    let te = data(100..104);
    let ev = EvalConfig::default();
    let a = train(&small(15), &tr, &[], &ev, None).unwrap();
    let b = train(&small(15), &tr, &[], &ev, None).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.report, b.report);
    let ea = evaluate(&a.checkpoint.params, &a.checkpoint.config, &ev, &te).unwrap();
    let eb = evaluate(&b.checkpoint.params, &b.checkpoint.config, &ev, &te).unwrap();
    assert_eq!(csv(&ea), csv(&eb));
    let c = train(&TrainConfig { seed: 1, ..small(15) }, &tr, &[], &ev, None).unwrap();
    assert_ne!(a.checkpoint.params, c.checkpoint.params);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let tr = data(0..4);
    let cfg = TrainConfig { lr: 0.0, ..small(10) };
    let run = train(&cfg, &tr, &[], &EvalConfig::default(), None).unwrap();
    assert_eq!(run.checkpoint.step, 10);
    assert_eq!(run.checkpoint.params, init_params(&cfg, tr[0].channels()));
}

#[test]
fn two_hundred_steps_lower_the_training_loss() {
    let tr = data(0..16);
    let cfg = small(200);
    let run = train(&cfg, &tr, &[], &EvalConfig::default(), None).unwrap();
    let gamma = run.checkpoint.gamma_sig;
    let before = fixed_loss(&init_params(&cfg, tr[0].channels()), &cfg, gamma, &tr);
    let after = fixed_loss(&run.checkpoint.params, &cfg, gamma, &tr);
    assert!(after < before, "loss {before} -> {after}");
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.xmck");
    let tr = data(0..6);
    let te = data(100..104);
    let ev = EvalConfig::default();
    let run = train(&small(10), &tr, &[], &ev, None).unwrap();
    run.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes(), run.checkpoint.to_bytes());
    let a = evaluate(&run.checkpoint.params, &run.checkpoint.config, &ev, &te).unwrap();
    let b = evaluate(&back.params, &back.config, &ev, &te).unwrap();
    assert_eq!(csv(&a), csv(&b));
    assert_eq!(a, b);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tr = data(0..6);
    let ev = EvalConfig::default();
    let full = train(&small(12), &tr, &[], &ev, None).unwrap();
    let half = train(&small(5), &tr, &[], &ev, None).unwrap();
    let ck = Checkpoint::from_bytes(&half.checkpoint.to_bytes()).unwrap();
    let rest = train(&small(12), &tr, &[], &ev, Some(ck)).unwrap();
    assert_eq!(rest.checkpoint.to_bytes(), full.checkpoint.to_bytes());
    assert_eq!(rest.report.loss_curve[..], full.report.loss_curve[5..]);
}

#[test]
fn resume_with_other_config_is_rejected() {
    let tr = data(0..3);
    let ev = EvalConfig::default();
    let run = train(&small(2), &tr, &[], &ev, None).unwrap();
    let other = TrainConfig { lr: 5e-3, ..small(4) };
    assert!(matches!(train(&other, &tr, &[], &ev, Some(run.checkpoint)), Err(Error::Config(_))));
}

#[test]
fn image_sides_off_the_patch_grid_are_rejected() {
    let odd = SceneConfig { height: 12, width: 12, ..scene_cfg() };
    let tr = generate_dataset(&odd, &[0, 1]).unwrap();
    assert!(matches!(train(&small(1), &tr, &[], &EvalConfig::default(), None), Err(Error::Config(_))));
    let cfg = ExperimentConfig { scene: odd, ..ExperimentConfig::default() };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn divergence_aborts_with_last_finite_checkpoint() {
    let tr = data(0..3);
    let cfg = TrainConfig { lr: 1e300, ..small(20) };
    let run = train(&cfg, &tr, &[], &EvalConfig::default(), None).unwrap();
    let err = run.aborted.expect("diverging run aborts");
    assert!(matches!(err, Error::NumericalAbort { .. }));
    assert_eq!(err.exit_code(), 3);
    assert!(run.checkpoint.step < 20);
    assert!(run.checkpoint.params.blocks.values().all(|t| t.all_finite()));
}

#[test]
fn validation_runs_on_schedule() {
    let tr = data(0..4);
    let val = data(50..52);
    let cfg = TrainConfig { val_every: 3, ..small(7) };
    let run = train(&cfg, &tr, &val, &EvalConfig::default(), None).unwrap();
    let steps: Vec<usize> = run.report.validation.iter().map(|v| v.step).collect();
    assert_eq!(steps, vec![3, 6, 7]);
    assert_eq!(run.report.loss_curve.len(), 7);
}

/// Cloud point `i` placed at `offset` meters from the surface seen at `pixel`.
fn place(sample: &mut SceneSample, pixel: usize, i: usize, offset: f64) {
    let s = sample.pixel_point(pixel).unwrap() + Vector3::new(offset, 0.0, 0.0);
    let p = sample.gt_pose.inverse().apply(&s);
    sample.cloud.points[i] = [p.x, p.y, p.z];
}

fn with_depth(sample: &SceneSample) -> Vec<usize> {
    (0..sample.n_pixels()).filter(|&p| sample.pixel_point(p).is_some()).collect()
}

#[test]
fn inlier_ratio_counts_three_of_ten() {
    let mut s = data(7..8).remove(0);
    let px = with_depth(&s);
    let mut matches = Vec::new();
    for i in 0..10 {
        place(&mut s, px[i], i, if i < 3 { 0.01 } else { 0.2 });
        matches.push(FineMatch { pixel: px[i], point: i, score: 1.0 });
    }
    assert_eq!(inlier_ratio(&s, &matches, 0.05), 0.3);
    assert_eq!(inlier_ratio(&s, &[], 0.05), 0.0);
}

#[test]
fn thresholds_are_strict() {
    let mut s = data(8..9).remove(0);
    let px = with_depth(&s)[0];
    place(&mut s, px, 0, 0.05);
    let d = (s.pixel_point(px).unwrap() - s.gt_pose.apply(&Vector3::from(s.cloud.points[0]))).norm();
    assert!(!is_inlier(&s, px, 0, d));
    assert!(is_inlier(&s, px, 0, d.next_up()));

    let matches: Vec<FineMatch> = (0..10).map(|i| FineMatch { pixel: px, point: i, score: 1.0 }).collect();
    for i in 1..10 {
        place(&mut s, px, i, 0.5);
    }
    place(&mut s, px, 0, 0.0);
    let ev = EvalConfig::default();
    let m = scene_metrics(&s, &matches, None, None, &ev);
    assert_eq!(m.ir, 0.1);
    assert!(!m.fmr);
    assert!(!m.rr);

    let off = xmreg::geometry::RigidTransform::from_axis_angle(Vector3::z(), 0.0, Vector3::new(0.0, 0.0, 0.1))
        .compose(&s.gt_pose);
    let est = PoseEstimate { transform: off, inliers: vec![], rmse_px: 0.0, iterations: 1, success: true };
    let rmse = scene_metrics(&s, &matches, Some(&est), None, &ev).rmse_m.unwrap();
    let at = EvalConfig { rr_thresh: rmse, ..ev };
    assert!(!scene_metrics(&s, &matches, Some(&est), None, &at).rr);
    let above = EvalConfig { rr_thresh: rmse.next_up(), ..ev };
    assert!(scene_metrics(&s, &matches, Some(&est), None, &above).rr);
}

#[test]
fn perfect_poses_give_full_recall() {
    let scenes = data(20..25);
    let rows: Vec<SceneMetrics> = scenes
        .iter()
        .map(|s| {
            let est = PoseEstimate { transform: s.gt_pose, inliers: vec![], rmse_px: 0.0, iterations: 1, success: true };
            scene_metrics(s, &[], Some(&est), None, &EvalConfig::default())
        })
        .collect();
    let means = MetricMeans::from_scenes(&rows);
    assert_eq!(means.rr, 1.0);
    assert_eq!(means.rmse_m, Some(0.0));
    assert_eq!(means.ir, 0.0);
}

#[test]
fn amam_does_not_touch_the_evaluation_path() {
    let tr = data(0..4);
    let te = data(100..103);
    let ev = EvalConfig::default();
    let cfg = small(5);
    let run = train(&cfg, &tr, &[], &ev, None).unwrap();
    let base = evaluate(&run.checkpoint.params, &cfg, &ev, &te).unwrap();
    let off = TrainConfig { flags: ModuleFlags { enable_amam: false, ..cfg.flags }, ..cfg.clone() };
    assert_eq!(evaluate(&run.checkpoint.params, &off, &ev, &te).unwrap(), base);
    let mut scrambled = run.checkpoint.params.clone();
    for name in ["clf.w1", "clf.b1", "clf.w2", "clf.b2", "clf.w3", "clf.b3"] {
        let t = scrambled.get(name).unwrap().map(|x| 3.0 * x + 1.0);
        scrambled.insert(name, t);
    }
    assert_eq!(evaluate(&scrambled, &cfg, &ev, &te).unwrap(), base);
}

#[test]
fn metrics_csv_has_one_row_per_scene() {
    let te = data(100..103);
    let cfg = small(0);
    let params = init_params(&cfg, te[0].channels());
    let e = evaluate(&params, &cfg, &EvalConfig::default(), &te).unwrap();
    let text = csv(&e);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "scene_id,ir,fmr_flag,rr_flag,rot_err_deg,trans_err_m,rmse_m,mmd");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 8));
    let report = MetricsReport::new(&EvalConfig::default(), e, vec![], vec![], None);
    assert!(report.means_consistent());
    assert_eq!(report.data, "synthetic");
    assert!(matches!(evaluate(&params, &cfg, &EvalConfig::default(), &[]), Err(Error::Usage(_))));
}

#[test]
fn separation_report_paths() {
    let te = data(100..104);
    let cfg = small(0);
    let params = init_params(&cfg, te[0].channels());
    let sep = uncertainty_separation(&params, &cfg, &te).unwrap();
    assert!(sep.corrupted.n > 0 && sep.clean.n > 0);
    assert!((0.0..=1.0).contains(&sep.p_value));

    let clean_cfg = SceneConfig { occlusion_fraction: 0.0, ..scene_cfg() };
    let clean = generate_dataset(&clean_cfg, &[1, 2, 3]).unwrap();
    assert!(matches!(uncertainty_separation(&params, &cfg, &clean), Err(Error::Usage(_))));

    let off = TrainConfig { flags: ModuleFlags::M3, ..cfg };
    assert!(matches!(uncertainty_separation(&params, &off, &te), Err(Error::Usage(_))));
}

#[test]
fn gamma_rule_scales_initial_entropy() {
    let tr = data(0..2);
    let cfg = small(0);
    let params = init_params(&cfg, tr[0].channels());
    let scene = prepare(&tr[0], &cfg).unwrap();
    let mut t = Tape::new();
    let p = params.bind(&mut t);
    let fwd = forward(&mut t, &p, &scene, &cfg, None).unwrap();
    let sum_q = total_entropy(&t, &fwd).unwrap();
    assert_eq!(resolve_gamma(&params, &cfg, &scene).unwrap(), 0.5 * sum_q);
    let fixed = TrainConfig { gamma_sig: Some(-3.0), ..cfg.clone() };
    assert_eq!(resolve_gamma(&params, &fixed, &scene).unwrap(), -3.0);
    let off = TrainConfig { flags: ModuleFlags::BL, ..cfg };
    assert_eq!(resolve_gamma(&params, &off, &scene).unwrap(), 0.0);
}
