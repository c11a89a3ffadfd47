//! End-to-end tests of the command-line surface: flag validation, exit
//! codes, file outputs, and determinism.

use std::path::Path;
use std::process::{Command, Output};

use pxray::env::{default_arm, observe, save_observation, EpisodeConfig, Scene, StartState};
use pxray::kinematics::ArmState;
use pxray::train::ArchSpec;
use pxray::weights::{load_weights, save_weights};

fn pxray(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pxray"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn mini_episodes(dir: &Path) -> String {
    let config = EpisodeConfig {
        targets: vec![[1.2, 0.8], [-0.6, 1.3]],
        starts: vec![StartState { theta: vec![0.6, 0.8], omega: vec![0.0, 0.0] }],
        steps: 20,
        seed: 5,
    };
    let path = dir.join("episodes.json");
    config.save(&path).unwrap();
    path.display().to_string()
}

/// Small 16x16 architecture to keep CLI tests quick.
fn mini_arch(dir: &Path) -> String {
    let mut arch = ArchSpec::toy(2);
    arch.image_shape = [16, 16, 1];
    arch.convs = vec![pxray::train::ConvSpec {
        kh: 3,
        kw: 3,
        cout: 2,
        stride: 2,
        padding: "valid".to_string(),
    }];
    arch.fusion_hidden = vec![8];
    let path = dir.join("arch.json");
    std::fs::write(&path, serde_json::to_string(&arch).unwrap()).unwrap();
    path.display().to_string()
}

fn write_arm(dir: &Path) -> String {
    let path = dir.join("arm.json");
    std::fs::write(&path, r#"{"link_lengths": [1.0, 1.0], "joint_inertias": [1.0, 1.0], "dt": 0.01}"#)
        .unwrap();
    path.display().to_string()
}

/// Weights + observation fixture on the 16x16 mini architecture.
fn attribution_fixture(dir: &Path) -> (String, String) {
    let mut arch = ArchSpec::toy(2);
    arch.image_shape = [16, 16, 1];
    arch.convs = vec![pxray::train::ConvSpec {
        kh: 3,
        kw: 3,
        cout: 2,
        stride: 2,
        padding: "valid".to_string(),
    }];
    arch.fusion_hidden = vec![8];
    let net = arch.build(9).unwrap();
    let weights = dir.join("w.json");
    save_weights(&net, &weights).unwrap();

    let scene = Scene::new(
        default_arm(),
        ArmState::at_rest(vec![0.6, 0.8]),
        (1.2, 0.8),
        (16, 16),
    )
    .unwrap();
    let obs = observe(&scene);
    let obs_path = dir.join("obs.json");
    save_observation(&obs, &obs_path).unwrap();
    (weights.display().to_string(), obs_path.display().to_string())
}

#[test]
fn clone_without_out_is_a_usage_error() {
    let out = pxray(&["clone"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn clone_writes_loadable_weights_and_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let episodes = mini_episodes(dir.path());
    let arch = mini_arch(dir.path());
    let w1 = dir.path().join("w1.json");
    let w2 = dir.path().join("w2.json");
    for w in [&w1, &w2] {
        let out = pxray(&[
            "clone",
            "--targets",
            &episodes,
            "--arch",
            &arch,
            "--seed",
            "5",
            "--epochs",
            "3",
            "--out",
            &w.display().to_string(),
        ]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    let net = load_weights(&w1).unwrap();
    assert_eq!(net.num_joints(), 2);
    assert_eq!(std::fs::read(&w1).unwrap(), std::fs::read(&w2).unwrap());
    // The training report landed next to the weights.
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("w1.report.json")).unwrap())
            .unwrap();
    assert!(report["final_mse"].as_f64().unwrap().is_finite());
}

#[test]
fn attribute_rejects_unknown_method() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, obs) = attribution_fixture(dir.path());
    let out = pxray(&["attribute", "--weights", &weights, "--obs", &obs, "--method", "shapley"]);
    assert_eq!(exit_code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("dtd") && stderr.contains("rap") && stderr.contains("gbp"));
}

#[test]
fn attribute_kinematic_alpha_requires_the_arm_file() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, obs) = attribution_fixture(dir.path());
    let out = pxray(&[
        "attribute", "--weights", &weights, "--obs", &obs, "--method", "dtd", "--alpha",
        "kinematic",
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--arm"));

    let arm = write_arm(dir.path());
    let out = pxray(&[
        "attribute", "--weights", &weights, "--obs", &obs, "--method", "dtd", "--alpha",
        "kinematic", "--arm", &arm,
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn attribute_uniform_alpha_needs_no_arm_and_conserves() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, obs) = attribution_fixture(dir.path());
    let csv = dir.path().join("att.csv");
    let heatmap = dir.path().join("hm.pgm");
    let out = pxray(&[
        "attribute",
        "--weights",
        &weights,
        "--obs",
        &obs,
        "--method",
        "dtd",
        "--alpha",
        "uniform",
        "--heatmap",
        &heatmap.display().to_string(),
        "--csv",
        &csv.display().to_string(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // Conservation from the emitted CSV alone.
    let body = std::fs::read_to_string(&csv).unwrap();
    let mut groups_sum = 0.0;
    let mut output_total = 0.0;
    let mut dropped = 0.0;
    for line in body.lines().skip(1) {
        let (name, value) = line.split_once(',').unwrap();
        let v: f64 = value.parse().unwrap();
        if name.starts_with("group_") {
            groups_sum += v;
        } else if name == "output_total" {
            output_total = v;
        } else if name == "dropped_mass" {
            dropped = v;
        }
    }
    assert!(output_total > 0.0);
    assert!(
        (groups_sum + dropped - output_total).abs() <= 1e-6 * output_total,
        "conservation violated: groups {groups_sum} + dropped {dropped} vs {output_total}"
    );
    let pgm = std::fs::read_to_string(&heatmap).unwrap();
    let (w, h, _) = pxray::analysis::parse_pgm(&pgm).unwrap();
    assert_eq!((w, h), (16, 16));
}

#[test]
fn rollout_zero_steps_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, _) = attribution_fixture(dir.path());
    let out_csv = dir.path().join("series.csv");
    let out = pxray(&[
        "rollout",
        "--weights",
        &weights,
        "--steps",
        "0",
        "--methods",
        "dtd",
        "--alpha",
        "uniform",
        "--out",
        &out_csv.display().to_string(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let body = std::fs::read_to_string(&out_csv).unwrap();
    assert_eq!(
        body.trim(),
        "t,method,alpha_mode,image,joint_pos,joint_vel,ee_pos,ee_vel,total,dropped"
    );
}

#[test]
fn rollout_emits_one_row_per_method_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, _) = attribution_fixture(dir.path());
    let out_csv = dir.path().join("series.csv");
    let out = pxray(&[
        "rollout",
        "--weights",
        &weights,
        "--steps",
        "5",
        "--methods",
        "dtd,rap,gbp",
        "--alpha",
        "kinematic",
        "--out",
        &out_csv.display().to_string(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let body = std::fs::read_to_string(&out_csv).unwrap();
    let rows: Vec<&str> = body.lines().skip(1).collect();
    assert_eq!(rows.len(), 15, "3 methods x 5 steps");
}

#[test]
fn rollout_records_target_change_step() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, _) = attribution_fixture(dir.path());
    let out_csv = dir.path().join("series.csv");
    let out = pxray(&[
        "rollout",
        "--weights",
        &weights,
        "--steps",
        "6",
        "--methods",
        "dtd",
        "--alpha",
        "uniform",
        "--target-change-step",
        "3",
        "--seed",
        "2",
        "--out",
        &out_csv.display().to_string(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let body = std::fs::read_to_string(&out_csv).unwrap();
    assert!(body.starts_with("# change_step=3\n"), "missing comment: {body}");
}

#[test]
fn rollout_is_deterministic_given_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, _) = attribution_fixture(dir.path());
    let mut outputs = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let path = dir.path().join(name);
        let out = pxray(&[
            "rollout",
            "--weights",
            &weights,
            "--steps",
            "6",
            "--methods",
            "dtd,gbp",
            "--alpha",
            "kinematic",
            "--target-change-step",
            "3",
            "--seed",
            "9",
            "--out",
            &path.display().to_string(),
        ]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
        outputs.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn check_validates_suite_and_trials() {
    let out = pxray(&["check", "--suite", "bogus", "--trials", "5"]);
    assert_eq!(exit_code(&out), 2);

    let out = pxray(&["check", "--suite", "all", "--trials", "0"]);
    assert_eq!(exit_code(&out), 2);

    let out = pxray(&["check", "--suite", "conservation", "--trials", "10", "--seed", "1"]);
    assert_eq!(exit_code(&out), 0, "stdout: {}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[PASS] conservation"));
}

#[test]
fn check_all_suites_pass_on_default_seed() {
    let out = pxray(&["check", "--suite", "all", "--trials", "10"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(exit_code(&out), 0, "stdout: {stdout}");
    for suite in ["conservation", "reduction", "gradients", "conv-unroll", "kinematics"] {
        assert!(stdout.contains(&format!("[PASS] {suite}")), "missing {suite}: {stdout}");
    }
}

#[test]
fn seed_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let episodes = mini_episodes(dir.path());
    let arch = mini_arch(dir.path());
    let w_env = dir.path().join("we.json");
    let w_flag = dir.path().join("wf.json");
    let out = Command::new(env!("CARGO_BIN_EXE_pxray"))
        .args([
            "clone", "--targets", &episodes, "--arch", &arch, "--epochs", "2", "--out",
            &w_env.display().to_string(),
        ])
        .env("PXRAY_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let out = pxray(&[
        "clone", "--targets", &episodes, "--arch", &arch, "--epochs", "2", "--seed", "42",
        "--out", &w_flag.display().to_string(),
    ]);
    assert_eq!(exit_code(&out), 0);
    assert_eq!(std::fs::read(&w_env).unwrap(), std::fs::read(&w_flag).unwrap());
}
