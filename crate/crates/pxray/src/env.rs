//! Self-contained visuomotor reaching environment: a rendered planar arm
//! chasing a target disc, a scripted Jacobian-transpose PD expert, and the
//! dataset plumbing for behavioral cloning.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{end_effector, forward_kinematics, jacobian_columns, ArmModel, ArmState};
use crate::tensor::Tensor;

/// Torques are clamped to this magnitude before integration.
pub const TORQUE_LIMIT: f64 = 5.0;
/// The episode counts as reached when the end-effector is this close.
pub const REACH_THRESHOLD: f64 = 0.05;
/// Rendered intensity of the arm links.
pub const LINK_INTENSITY: f64 = 0.8;
/// Rendered intensity of the target disc.
pub const TARGET_INTENSITY: f64 = 1.0;
/// Target disc radius in pixels.
pub const TARGET_RADIUS_PX: f64 = 2.0;
/// Default rendered image side length.
pub const DEFAULT_IMAGE_SIZE: usize = 32;

/// Square world window rendered onto the image.
///
/// World x maps left-to-right onto columns, world y maps bottom-to-top onto
/// rows (row 0 is the top of the image): col = (x - cx + e) / 2e * (W - 1),
/// row = (cy + e - y) / 2e * (H - 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    pub center: (f64, f64),
    pub half_extent: f64,
}

impl View {
    /// Fractional (row, col) pixel coordinates of a world point.
    pub fn to_pixel(&self, p: (f64, f64), rows: usize, cols: usize) -> (f64, f64) {
        let e = self.half_extent;
        let col = (p.0 - self.center.0 + e) / (2.0 * e) * (cols - 1) as f64;
        let row = (self.center.1 + e - p.1) / (2.0 * e) * (rows - 1) as f64;
        (row, col)
    }
}

/// Arm, target, and camera for one reaching episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub arm: ArmModel,
    pub state: ArmState,
    pub target: (f64, f64),
    pub image_size: (usize, usize),
    pub view: View,
}

impl Scene {
    /// Validates that the target lies in the reachable annulus and frames
    /// the view on the arm's workspace.
    pub fn new(
        arm: ArmModel,
        state: ArmState,
        target: (f64, f64),
        image_size: (usize, usize),
    ) -> Result<Self> {
        if state.theta.len() != arm.num_joints() || state.omega.len() != arm.num_joints() {
            return Err(Error::config(format!(
                "state has {} joints, arm has {}",
                state.theta.len(),
                arm.num_joints()
            )));
        }
        let d = dist(target, arm.base_pose);
        if d < arm.min_reach() || d > arm.total_reach() {
            return Err(Error::config(format!(
                "target at distance {d:.3} outside reachable annulus [{:.3}, {:.3}]",
                arm.min_reach(),
                arm.total_reach()
            )));
        }
        let view = View { center: arm.base_pose, half_extent: 1.1 * arm.total_reach() };
        Ok(Scene { arm, state, target, image_size, view })
    }

    pub fn end_effector(&self) -> (f64, f64) {
        end_effector(&self.arm, &self.state.theta)
    }

    pub fn reached(&self) -> bool {
        dist(self.end_effector(), self.target) < REACH_THRESHOLD
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// One policy input: rendered image plus the configuration vector
/// [joint_pos, joint_vel, ee_pos, ee_vel].
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub image: Tensor,
    pub config: Tensor,
}

/// Configuration vector length for a J-joint arm.
pub fn config_dim(joints: usize) -> usize {
    2 * joints + 4
}

/// Renders the scene: links as width-1 segments, the target as a filled
/// disc, black background.
pub fn render_scene(scene: &Scene) -> Tensor {
    let (rows, cols) = scene.image_size;
    let mut img = Tensor::zeros(vec![rows, cols, 1]);
    let points = forward_kinematics(&scene.arm, &scene.state.theta);
    for seg in points.windows(2) {
        draw_segment(&mut img, &scene.view, seg[0], seg[1], LINK_INTENSITY);
    }
    draw_disc(&mut img, &scene.view, scene.target, TARGET_RADIUS_PX, TARGET_INTENSITY);
    img
}

fn draw_segment(img: &mut Tensor, view: &View, a: (f64, f64), b: (f64, f64), intensity: f64) {
    let (rows, cols) = (img.shape()[0], img.shape()[1]);
    let (r0, c0) = view.to_pixel(a, rows, cols);
    let (r1, c1) = view.to_pixel(b, rows, cols);
    let len = ((r1 - r0).powi(2) + (c1 - c0).powi(2)).sqrt();
    let steps = (2.0 * len).ceil() as usize + 1;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let r = (r0 + t * (r1 - r0)).round();
        let c = (c0 + t * (c1 - c0)).round();
        stamp(img, r, c, intensity);
    }
}

fn draw_disc(img: &mut Tensor, view: &View, center: (f64, f64), radius: f64, intensity: f64) {
    let (rows, cols) = (img.shape()[0], img.shape()[1]);
    let (r0, c0) = view.to_pixel(center, rows, cols);
    let lo_r = (r0 - radius).floor() as i64;
    let hi_r = (r0 + radius).ceil() as i64;
    let lo_c = (c0 - radius).floor() as i64;
    let hi_c = (c0 + radius).ceil() as i64;
    for r in lo_r..=hi_r {
        for c in lo_c..=hi_c {
            if (r as f64 - r0).powi(2) + (c as f64 - c0).powi(2) <= radius * radius {
                stamp(img, r as f64, c as f64, intensity);
            }
        }
    }
}

fn stamp(img: &mut Tensor, r: f64, c: f64, intensity: f64) {
    let (rows, cols) = (img.shape()[0], img.shape()[1]);
    if r < 0.0 || c < 0.0 || r >= rows as f64 || c >= cols as f64 {
        return;
    }
    let i = img.idx3(r as usize, c as usize, 0);
    img.data_mut()[i] = img.data()[i].max(intensity);
}

/// Builds the observation of the current scene.
pub fn observe(scene: &Scene) -> Observation {
    let j = scene.arm.num_joints();
    let mut config = Vec::with_capacity(config_dim(j));
    config.extend_from_slice(&scene.state.theta);
    config.extend_from_slice(&scene.state.omega);
    let ee = scene.end_effector();
    config.push(ee.0);
    config.push(ee.1);
    let cols = jacobian_columns(&scene.arm, &scene.state.theta);
    let (mut vx, mut vy) = (0.0, 0.0);
    for (col, w) in cols.iter().zip(&scene.state.omega) {
        vx += col.0 * w;
        vy += col.1 * w;
    }
    config.push(vx);
    config.push(vy);
    Observation { image: render_scene(scene), config: Tensor::vector(&config) }
}

/// Advances the scene one step: semi-implicit Euler on all joints with the
/// torques clamped to the limit. Returns the new scene, its observation,
/// and whether the end-effector is within the reach threshold.
pub fn env_step(scene: &Scene, torques: &[f64]) -> Result<(Scene, Observation, bool)> {
    let j = scene.arm.num_joints();
    if torques.len() != j {
        return Err(Error::shape(format!("{} torques for a {j}-joint arm", torques.len())));
    }
    let mut next = scene.clone();
    for joint in 0..j {
        let tau = torques[joint].clamp(-TORQUE_LIMIT, TORQUE_LIMIT);
        next.state.omega[joint] += tau / scene.arm.joint_inertias[joint] * scene.arm.dt;
        next.state.theta[joint] += next.state.omega[joint] * scene.arm.dt;
    }
    let obs = observe(&next);
    let reached = next.reached();
    Ok((next, obs, reached))
}

/// PD gains for the scripted expert.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Gains { kp: 14.0, kd: 4.0 }
    }
}

/// Jacobian-transpose PD controller toward the target:
/// tau = J^T (Kp (target - ee) - Kd ee_vel).
pub fn pd_expert(scene: &Scene, gains: &Gains) -> Vec<f64> {
    let ee = scene.end_effector();
    let cols = jacobian_columns(&scene.arm, &scene.state.theta);
    let (mut vx, mut vy) = (0.0, 0.0);
    for (col, w) in cols.iter().zip(&scene.state.omega) {
        vx += col.0 * w;
        vy += col.1 * w;
    }
    let fx = gains.kp * (scene.target.0 - ee.0) - gains.kd * vx;
    let fy = gains.kp * (scene.target.1 - ee.1) - gains.kd * vy;
    cols.iter().map(|col| col.0 * fx + col.1 * fy).collect()
}

/// Runs the expert until it reaches the target or the step budget runs out.
pub fn expert_rollout(scene: &Scene, gains: &Gains, max_steps: usize) -> (bool, usize) {
    let mut scene = scene.clone();
    for step in 0..max_steps {
        if scene.reached() {
            return (true, step);
        }
        let torques = pd_expert(&scene, gains);
        match env_step(&scene, &torques) {
            Ok((next, _, reached)) => {
                if reached {
                    return (true, step + 1);
                }
                scene = next;
            }
            Err(_) => return (false, step),
        }
    }
    (false, max_steps)
}

/// One behavioral-cloning record: what the expert saw and what it did.
#[derive(Debug, Clone)]
pub struct Sample {
    pub observation: Observation,
    pub torque: Vec<f64>,
}

/// Episode configuration file: targets, start states, step counts, seed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpisodeConfig {
    pub targets: Vec<[f64; 2]>,
    /// One start per target, or a single start shared by all targets.
    pub starts: Vec<StartState>,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StartState {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
}

impl EpisodeConfig {
    /// The bundled four-target reaching setup on the default 2-link arm.
    ///
    /// All episodes share one canonical start state, so the configuration
    /// input carries no information about which target is active; a policy
    /// cloned on this data has to read the target from the image.
    pub fn default_toy() -> Self {
        EpisodeConfig {
            targets: vec![[1.4, 0.6], [0.2, 1.7], [-0.8, 1.2], [-1.4, 0.3]],
            starts: vec![StartState { theta: vec![0.6, 0.8], omega: vec![0.0, 0.0] }],
            steps: 300,
            seed: 7,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let source =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: EpisodeConfig = serde_json::from_str(&source).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string_pretty(self).expect("episode config serializes");
        std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::config("episode config needs at least one target"));
        }
        if self.starts.is_empty() {
            return Err(Error::config("episode config needs at least one start state"));
        }
        if self.starts.len() != 1 && self.starts.len() != self.targets.len() {
            return Err(Error::config(format!(
                "{} start states for {} targets (use 1 or match)",
                self.starts.len(),
                self.targets.len()
            )));
        }
        Ok(())
    }

    /// Start state for target index `i`.
    pub fn start_for(&self, i: usize) -> &StartState {
        if self.starts.len() == 1 {
            &self.starts[0]
        } else {
            &self.starts[i]
        }
    }
}

/// The default 2-link arm the toy environment runs on.
pub fn default_arm() -> ArmModel {
    ArmModel::new(vec![1.0, 1.0], vec![1.0, 1.0], 0.01).expect("default arm is valid")
}

/// Rolls out the expert from every (start, target) pair, recording every
/// `subsample`-th (observation, clamped torque) pair.
///
/// With `episodes_per_target > 1`, additional rollouts start from the
/// canonical state with small seeded joint-angle perturbations.
pub fn collect_dataset(
    arm: &ArmModel,
    episodes: &EpisodeConfig,
    gains: &Gains,
    image_size: (usize, usize),
    subsample: usize,
    episodes_per_target: usize,
) -> Result<Vec<Sample>> {
    use rand::{Rng, SeedableRng};
    episodes.validate()?;
    let subsample = subsample.max(1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(episodes.seed);
    let mut samples = Vec::new();
    for (i, target) in episodes.targets.iter().enumerate() {
        let start = episodes.start_for(i);
        for episode in 0..episodes_per_target.max(1) {
            let mut theta = start.theta.clone();
            if episode > 0 {
                for th in theta.iter_mut() {
                    *th += rng.gen_range(-0.15..0.15);
                }
            }
            let mut scene = Scene::new(
                arm.clone(),
                ArmState { theta, omega: start.omega.clone() },
                (target[0], target[1]),
                image_size,
            )?;
            let mut obs = observe(&scene);
            for step in 0..episodes.steps {
                let torques: Vec<f64> = pd_expert(&scene, gains)
                    .into_iter()
                    .map(|t| t.clamp(-TORQUE_LIMIT, TORQUE_LIMIT))
                    .collect();
                if step % subsample == 0 {
                    samples.push(Sample { observation: obs.clone(), torque: torques.clone() });
                }
                let (next, next_obs, _) = env_step(&scene, &torques)?;
                scene = next;
                obs = next_obs;
            }
        }
    }
    Ok(samples)
}

#[derive(Serialize, Deserialize)]
struct ObsRecord {
    image: Vec<f64>,
    config: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    obs: ObsRecord,
    torque: Vec<f64>,
}

/// Writes a dataset as JSON-lines, one `{obs, torque}` record per line.
pub fn write_dataset(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for s in samples {
        let record = SampleRecord {
            obs: ObsRecord {
                image: s.observation.image.data().to_vec(),
                config: s.observation.config.data().to_vec(),
            },
            torque: s.torque.clone(),
        };
        out.push_str(&serde_json::to_string(&record).expect("sample serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a JSON-lines dataset back; `image_shape` restores the image tensors.
pub fn read_dataset(
    path: impl AsRef<Path>,
    image_shape: (usize, usize, usize),
) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let source =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut samples = Vec::new();
    for (lineno, line) in source.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: format!("{}:{}", path.display(), lineno + 1),
            detail: e.to_string(),
        })?;
        samples.push(Sample {
            observation: Observation {
                image: Tensor::new(
                    vec![image_shape.0, image_shape.1, image_shape.2],
                    record.obs.image,
                )?,
                config: Tensor::vector(&record.obs.config),
            },
            torque: record.torque,
        });
    }
    Ok(samples)
}

/// Writes a single observation file (`{"image": [...], "config": [...]}`).
pub fn save_observation(obs: &Observation, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let record = ObsRecord { image: obs.image.data().to_vec(), config: obs.config.data().to_vec() };
    let body = serde_json::to_string(&record).expect("observation serializes");
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads an observation file as raw vectors; the caller validates lengths
/// against the network it is paired with.
pub fn load_observation_raw(path: impl AsRef<Path>) -> Result<(Vec<f64>, Vec<f64>)> {
    let path = path.as_ref();
    let source =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let record: ObsRecord = serde_json::from_str(&source).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok((record.image, record.config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_scene() -> Scene {
        Scene::new(
            default_arm(),
            ArmState::at_rest(vec![0.6, 0.8]),
            (1.2, 0.8),
            (DEFAULT_IMAGE_SIZE, DEFAULT_IMAGE_SIZE),
        )
        .unwrap()
    }

    #[test]
    fn scene_rejects_unreachable_targets() {
        let arm = default_arm();
        let state = ArmState::at_rest(vec![0.0, 0.0]);
        assert!(Scene::new(arm.clone(), state.clone(), (3.0, 0.0), (32, 32)).is_err());
        assert!(Scene::new(arm, state, (1.0, 1.0), (32, 32)).is_ok());
    }

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let scene = toy_scene();
        let a = render_scene(&scene);
        let b = render_scene(&scene);
        assert_eq!(a, b);
        for &v in a.data() {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(a.data().contains(&TARGET_INTENSITY));
        assert!(a.data().contains(&LINK_INTENSITY));
    }

    #[test]
    fn off_view_scene_renders_black() {
        let mut scene = toy_scene();
        scene.view = View { center: (100.0, 100.0), half_extent: 1.0 };
        let img = render_scene(&scene);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_at_view_center_lands_on_center_pixel() {
        let mut scene = toy_scene();
        // Move the target onto the workspace center (the view center).
        scene.target = scene.arm.base_pose;
        let img = render_scene(&scene);
        // The brightest pixel block sits within one pixel of the center.
        let (rows, cols) = scene.image_size;
        let (r0, c0) = scene.view.to_pixel(scene.target, rows, cols);
        let mut hit = false;
        for dr in -1..=1i64 {
            for dc in -1..=1i64 {
                let r = (r0.round() as i64 + dr).clamp(0, rows as i64 - 1) as usize;
                let c = (c0.round() as i64 + dc).clamp(0, cols as i64 - 1) as usize;
                if img.data()[img.idx3(r, c, 0)] == TARGET_INTENSITY {
                    hit = true;
                }
            }
        }
        assert!(hit, "target disc not found at the view center");
    }

    #[test]
    fn zero_torque_from_rest_is_a_fixed_point() {
        let scene = toy_scene();
        let (next, _, _) = env_step(&scene, &[0.0, 0.0]).unwrap();
        assert_eq!(next.state, scene.state);
    }

    #[test]
    fn arm_at_target_reports_reached() {
        let arm = default_arm();
        let state = ArmState::at_rest(vec![0.6, 0.8]);
        let target = end_effector(&arm, &state.theta);
        let scene = Scene::new(arm, state, target, (32, 32)).unwrap();
        assert!(scene.reached());
        let (_, _, reached) = env_step(&scene, &[0.0, 0.0]).unwrap();
        assert!(reached);
    }

    #[test]
    fn constant_torque_matches_closed_form() {
        // Semi-implicit Euler with constant acceleration a has the closed
        // form theta_n = theta_0 + a dt^2 n(n+1)/2.
        let mut scene = toy_scene();
        scene.state = ArmState::at_rest(vec![0.0, 0.0]);
        let tau = [0.7, -0.3];
        let mut cur = scene.clone();
        for _ in 0..100 {
            cur = env_step(&cur, &tau).unwrap().0;
        }
        let n = 100.0;
        for j in 0..2 {
            let a = tau[j] / scene.arm.joint_inertias[j];
            let expect = a * scene.arm.dt * scene.arm.dt * n * (n + 1.0) / 2.0;
            assert!(
                (cur.state.theta[j] - expect).abs() < 1e-9,
                "joint {j}: {} vs {expect}",
                cur.state.theta[j]
            );
        }
    }

    #[test]
    fn expert_is_zero_at_the_target_and_linear_in_kp() {
        let arm = default_arm();
        let state = ArmState::at_rest(vec![0.6, 0.8]);
        let target = end_effector(&arm, &state.theta);
        let scene = Scene::new(arm, state, target, (32, 32)).unwrap();
        let tau = pd_expert(&scene, &Gains::default());
        assert!(tau.iter().all(|t| t.abs() < 1e-12));

        let scene = toy_scene();
        let t1 = pd_expert(&scene, &Gains { kp: 5.0, kd: 0.0 });
        let t2 = pd_expert(&scene, &Gains { kp: 10.0, kd: 0.0 });
        for (a, b) in t1.iter().zip(&t2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn expert_reaches_all_default_targets() {
        let arm = default_arm();
        let episodes = EpisodeConfig::default_toy();
        for (i, target) in episodes.targets.iter().enumerate() {
            let start = episodes.start_for(i);
            let scene = Scene::new(
                arm.clone(),
                ArmState { theta: start.theta.clone(), omega: start.omega.clone() },
                (target[0], target[1]),
                (32, 32),
            )
            .unwrap();
            let (reached, steps) = expert_rollout(&scene, &Gains::default(), 400);
            assert!(reached, "expert failed to reach target {i} within 400 steps");
            assert!(steps <= 400);
        }
    }

    #[test]
    fn dataset_round_trips_through_jsonl() {
        let arm = default_arm();
        let mut episodes = EpisodeConfig::default_toy();
        episodes.steps = 5;
        let samples =
            collect_dataset(&arm, &episodes, &Gains::default(), (8, 8), 1, 1).unwrap();
        assert_eq!(samples.len(), 4 * 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        write_dataset(&samples, &path).unwrap();
        let back = read_dataset(&path, (8, 8, 1)).unwrap();
        assert_eq!(back.len(), samples.len());
        assert_eq!(back[3].observation.image, samples[3].observation.image);
        assert_eq!(back[3].observation.config, samples[3].observation.config);
        assert_eq!(back[3].torque, samples[3].torque);
    }

    #[test]
    fn observation_file_round_trips() {
        let obs = observe(&toy_scene());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.json");
        save_observation(&obs, &path).unwrap();
        let (image, config) = load_observation_raw(&path).unwrap();
        assert_eq!(image, obs.image.data());
        assert_eq!(config, obs.config.data());
    }
}
