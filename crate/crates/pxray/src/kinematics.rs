//! Planar N-link arm: forward kinematics, single-joint probe dynamics, and
//! the per-joint importance factors that weight torque outputs by how much
//! they move the end-effector.

use std::path::Path;

use serde::Deserialize;

use crate::attribution::ImportanceFactors;
use crate::error::{Error, Result};

/// Planar kinematic chain with decoupled per-joint inertias.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmModel {
    pub link_lengths: Vec<f64>,
    pub joint_inertias: Vec<f64>,
    pub dt: f64,
    pub base_pose: (f64, f64),
}

impl ArmModel {
    pub fn new(link_lengths: Vec<f64>, joint_inertias: Vec<f64>, dt: f64) -> Result<Self> {
        if link_lengths.is_empty() {
            return Err(Error::config("arm needs at least one link"));
        }
        if link_lengths.len() != joint_inertias.len() {
            return Err(Error::config(format!(
                "{} link lengths but {} joint inertias",
                link_lengths.len(),
                joint_inertias.len()
            )));
        }
        if link_lengths.iter().chain(&joint_inertias).any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::config("link lengths and inertias must be positive and finite"));
        }
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Error::config("integration step dt must be positive"));
        }
        Ok(ArmModel { link_lengths, joint_inertias, dt, base_pose: (0.0, 0.0) })
    }

    pub fn num_joints(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn total_reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    /// Inner radius of the reachable annulus.
    pub fn min_reach(&self) -> f64 {
        // For a 2-link arm this is |L1 - L2|; with more links the longest
        // link minus the rest, floored at zero.
        let longest = self.link_lengths.iter().cloned().fold(0.0, f64::max);
        (2.0 * longest - self.total_reach()).max(0.0)
    }

    /// Loads an arm description file: `{"link_lengths": [...],
    /// "joint_inertias": [...], "dt": 0.01}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct ArmFile {
            link_lengths: Vec<f64>,
            joint_inertias: Vec<f64>,
            dt: f64,
            #[serde(default)]
            base_pose: Option<(f64, f64)>,
        }
        let path = path.as_ref();
        let source =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: ArmFile = serde_json::from_str(&source).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let mut model = ArmModel::new(file.link_lengths, file.joint_inertias, file.dt)?;
        if let Some(base) = file.base_pose {
            model.base_pose = base;
        }
        Ok(model)
    }
}

/// Joint angles and angular velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmState {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
}

impl ArmState {
    pub fn at_rest(theta: Vec<f64>) -> Self {
        let omega = vec![0.0; theta.len()];
        ArmState { theta, omega }
    }
}

/// Positions of every joint followed by the end-effector, cumulative-angle
/// planar chain: p_k = p_{k-1} + L_k (cos sum(theta), sin sum(theta)).
pub fn forward_kinematics(model: &ArmModel, theta: &[f64]) -> Vec<(f64, f64)> {
    let mut points = Vec::with_capacity(model.num_joints() + 1);
    let (mut x, mut y) = model.base_pose;
    points.push((x, y));
    let mut angle = 0.0;
    for (l, th) in model.link_lengths.iter().zip(theta) {
        angle += th;
        x += l * angle.cos();
        y += l * angle.sin();
        points.push((x, y));
    }
    points
}

/// End-effector position.
pub fn end_effector(model: &ArmModel, theta: &[f64]) -> (f64, f64) {
    *forward_kinematics(model, theta).last().expect("chain has at least one link")
}

/// Columns of the end-effector Jacobian: d(ee)/d(theta_j) is the radius
/// vector from joint j to the end-effector rotated by 90 degrees.
pub fn jacobian_columns(model: &ArmModel, theta: &[f64]) -> Vec<(f64, f64)> {
    let points = forward_kinematics(model, theta);
    let ee = *points.last().unwrap();
    points[..model.num_joints()]
        .iter()
        .map(|p| (-(ee.1 - p.1), ee.0 - p.0))
        .collect()
}

/// One semi-implicit Euler step actuating only joint `j`; every other joint
/// is frozen in place.
pub fn probe_step(model: &ArmModel, state: &ArmState, j: usize, tau: f64) -> ArmState {
    let mut next = state.clone();
    next.omega[j] += tau / model.joint_inertias[j] * model.dt;
    next.theta[j] += next.omega[j] * model.dt;
    next
}

/// Alpha computation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaMode {
    /// Probe each joint with a unit torque and weight by the resulting
    /// end-effector displacement.
    Kinematic,
    /// Equal weight per joint (used when dynamics are unavailable).
    Uniform,
}

impl AlphaMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AlphaMode::Kinematic => "kinematic",
            AlphaMode::Uniform => "uniform",
        }
    }
}

impl std::str::FromStr for AlphaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kinematic" => Ok(AlphaMode::Kinematic),
            "uniform" => Ok(AlphaMode::Uniform),
            other => Err(Error::config(format!(
                "unknown alpha mode {other:?} (kinematic, uniform)"
            ))),
        }
    }
}

/// Importance factor per joint, normalized to sum 1.
///
/// Kinematic mode probes each joint with a unit torque for one `dt` and
/// takes the end-effector displacement relative to a zero-torque probe, so
/// the factor isolates the torque's own effect even from a moving state.
pub fn importance_factors(model: &ArmModel, state: &ArmState, mode: AlphaMode) -> ImportanceFactors {
    let j = model.num_joints();
    match mode {
        AlphaMode::Uniform => ImportanceFactors::uniform(j),
        AlphaMode::Kinematic => {
            let mut raw = Vec::with_capacity(j);
            for joint in 0..j {
                let actuated = probe_step(model, state, joint, 1.0);
                let coasted = probe_step(model, state, joint, 0.0);
                let a = end_effector(model, &actuated.theta);
                let b = end_effector(model, &coasted.theta);
                raw.push(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt());
            }
            let total: f64 = raw.iter().sum();
            if total <= 0.0 {
                return ImportanceFactors::uniform(j);
            }
            ImportanceFactors::new(raw.iter().map(|v| v / total).collect())
                .expect("normalized probe displacements are valid factors")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, SQRT_2};

    fn two_link() -> ArmModel {
        ArmModel::new(vec![1.0, 1.0], vec![1.0, 1.0], 0.01).unwrap()
    }

    #[test]
    fn straight_arm_reaches_two() {
        let ee = end_effector(&two_link(), &[0.0, 0.0]);
        assert_eq!(ee, (2.0, 0.0));
    }

    #[test]
    fn quarter_turn_points_up() {
        let ee = end_effector(&two_link(), &[FRAC_PI_2, 0.0]);
        assert!((ee.0).abs() < 1e-12);
        assert!((ee.1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn forty_five_degree_elbow() {
        let ee = end_effector(&two_link(), &[FRAC_PI_4, FRAC_PI_4]);
        assert!((ee.0 - SQRT_2 / 2.0).abs() < 1e-12);
        assert!((ee.1 - (SQRT_2 / 2.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn probe_step_closed_form() {
        let model = two_link();
        let state = ArmState::at_rest(vec![0.0, 0.0]);
        let next = probe_step(&model, &state, 1, 1.0);
        assert!((next.theta[1] - 1e-4).abs() < 1e-18);
        assert_eq!(next.theta[0], 0.0);
        assert_eq!(next.omega[0], 0.0);

        let idle = probe_step(&model, &state, 1, 0.0);
        assert_eq!(idle, state);

        let neg = probe_step(&model, &state, 1, -1.0);
        assert_eq!(neg.theta[1], -next.theta[1]);
    }

    #[test]
    fn importance_two_link_fixture() {
        let model = two_link();
        let alpha = importance_factors(&model, &ArmState::at_rest(vec![0.0, 0.0]), AlphaMode::Kinematic);
        let a = alpha.values();
        assert!((a[0] - 2.0 / 3.0).abs() < 1e-3 * (2.0 / 3.0), "alpha[0] = {}", a[0]);
        assert!((a[1] - 1.0 / 3.0).abs() < 1e-3 * (1.0 / 3.0), "alpha[1] = {}", a[1]);
    }

    #[test]
    fn uniform_mode_is_flat() {
        let model = ArmModel::new(vec![1.0; 7], vec![1.0; 7], 0.01).unwrap();
        let alpha = importance_factors(&model, &ArmState::at_rest(vec![0.0; 7]), AlphaMode::Uniform);
        for &a in alpha.values() {
            assert!((a - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_link_normalizes_to_one() {
        let model = ArmModel::new(vec![0.8], vec![2.0], 0.01).unwrap();
        let alpha = importance_factors(
            &model,
            &ArmState { theta: vec![0.3], omega: vec![-0.2] },
            AlphaMode::Kinematic,
        );
        assert!((alpha.values()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn alpha_invariant_under_uniform_inertia_scaling() {
        let state = ArmState::at_rest(vec![0.4, -0.7]);
        let a = importance_factors(&two_link(), &state, AlphaMode::Kinematic);
        let scaled = ArmModel::new(vec![1.0, 1.0], vec![5.0, 5.0], 0.01).unwrap();
        let b = importance_factors(&scaled, &state, AlphaMode::Kinematic);
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn kinematic_alpha_tracks_jacobian_column_norms() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let model = two_link();
        for _ in 0..20 {
            let theta = vec![rng.gen_range(-2.0..2.0), rng.gen_range(0.5..2.5)];
            let omega = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let state = ArmState { theta: theta.clone(), omega };
            let alpha = importance_factors(&model, &state, AlphaMode::Kinematic);
            let cols = jacobian_columns(&model, &theta);
            let norms: Vec<f64> =
                cols.iter().map(|c| (c.0 * c.0 + c.1 * c.1).sqrt() / model.joint_inertias[0]).collect();
            let total: f64 = norms.iter().sum();
            for (a, n) in alpha.values().iter().zip(&norms) {
                let predicted = n / total;
                assert!(
                    (a - predicted).abs() <= 0.05 * predicted,
                    "alpha {a} vs jacobian prediction {predicted}"
                );
            }
        }
    }

    #[test]
    fn arm_model_rejects_bad_parameters() {
        assert!(ArmModel::new(vec![], vec![], 0.01).is_err());
        assert!(ArmModel::new(vec![1.0], vec![0.0], 0.01).is_err());
        assert!(ArmModel::new(vec![1.0], vec![1.0], 0.0).is_err());
        assert!(ArmModel::new(vec![1.0, 1.0], vec![1.0], 0.01).is_err());
    }
}
