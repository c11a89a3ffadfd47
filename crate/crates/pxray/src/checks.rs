//! Property suites with pinned tolerances: conservation, rule reductions,
//! gradient cross-checks, the conv/unroll oracle, and the kinematics
//! predictions. Shared by the acceptance tests and the `check` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attribution::{
    attribute_dtd, propagate_dense_zplus, propagate_input_layer, propagate_output_layer,
    DropStats, ImportanceFactors,
};
use crate::error::{Error, Result};
use crate::gradient::{input_gradients, numeric_gradient, ReluMode};
use crate::kinematics::{importance_factors, jacobian_columns, AlphaMode, ArmModel, ArmState};
use crate::network::{
    network_forward, Conv2dLayer, DenseLayer, InputGroup, Layer, Padding, PolicyNetwork,
    SpatialSoftmaxLayer,
};
use crate::tensor::Tensor;

pub const CONSERVATION_REL_TOL: f64 = 1e-6;
pub const GRADIENT_REL_TOL: f64 = 1e-4;
pub const GRADIENT_ABS_TOL: f64 = 1e-6;
pub const CONV_UNROLL_TOL: f64 = 1e-12;
pub const KINEMATICS_FIXTURE_REL_TOL: f64 = 1e-3;
pub const KINEMATICS_JACOBIAN_REL_TOL: f64 = 0.05;

/// Outcome of one property suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub trials: usize,
    pub failures: usize,
    pub worst_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl SuiteReport {
    fn finish(
        name: &'static str,
        trials: usize,
        failures: usize,
        worst_error: f64,
        tolerance: f64,
        detail: String,
    ) -> Self {
        SuiteReport { name, trials, failures, worst_error, tolerance, passed: failures == 0, detail }
    }

    pub fn render(&self) -> String {
        format!(
            "[{}] {}: {} trials, {} failures, worst error {:.3e} (tolerance {:.1e}){}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.trials,
            self.failures,
            self.worst_error,
            self.tolerance,
            if self.detail.is_empty() { String::new() } else { format!(" — {}", self.detail) }
        )
    }
}

fn random_dense(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize, bias_scale: f64) -> DenseLayer {
    let weights = Tensor::new(
        vec![n_in, n_out],
        (0..n_in * n_out).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let bias = Tensor::new(
        vec![n_out],
        (0..n_out).map(|_| rng.gen_range(-bias_scale..=bias_scale.max(f64::MIN_POSITIVE))).collect(),
    )
    .unwrap();
    DenseLayer::new(weights, bias).unwrap()
}

/// Random mixed-sign network: a tiny spatial-softmax vision stage plus 2-4
/// dense fusion layers with dims <= 32, with a signed configuration input.
pub fn random_mixed_net(rng: &mut ChaCha8Rng) -> (PolicyNetwork, Tensor, Tensor) {
    let config_dim = rng.gen_range(2..=28);
    let n_dense = rng.gen_range(2..=4);
    let mut fusion = Vec::new();
    let mut dim = 2 + config_dim;
    for i in 0..n_dense {
        let out = if i + 1 == n_dense { rng.gen_range(1..=4) } else { rng.gen_range(2..=32) };
        fusion.push(Layer::Dense(random_dense(rng, dim, out, 0.5)));
        if i + 1 < n_dense {
            fusion.push(Layer::Relu);
        }
        dim = out;
    }
    let net = PolicyNetwork::new(
        (2, 2, 1),
        config_dim,
        vec![InputGroup::new("joint_pos", 0, config_dim)],
        vec![Layer::SpatialSoftmax(SpatialSoftmaxLayer { rows: 2, cols: 2, channels: 1 })],
        fusion,
    )
    .unwrap();
    let image = Tensor::new(vec![2, 2, 1], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap();
    let config =
        Tensor::new(vec![config_dim], (0..config_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
    (net, image, config)
}

/// Conservation: over random mixed-sign networks, the summed dtd input
/// relevance plus dropped mass equals sum_j alpha_j |tau_j|.
pub fn conservation_suite(trials: usize, seed: u64) -> SuiteReport {
    conservation_suite_with_tolerance(trials, seed, CONSERVATION_REL_TOL)
}

pub fn conservation_suite_with_tolerance(trials: usize, seed: u64, tol: f64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let (net, image, config) = random_mixed_net(&mut rng);
        let joints = net.num_joints();
        let alpha = ImportanceFactors::new(
            (0..joints).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>(),
        )
        .unwrap();
        let result = attribute_dtd(&net, &image, &config, &alpha).expect("dtd runs");
        let scale = result.output_total.max(1e-12);
        let rel = result.conservation_error() / scale;
        worst = worst.max(rel);
        if rel > tol {
            failures += 1;
        }
    }
    SuiteReport::finish("conservation", trials, failures, worst, tol, String::new())
}

/// Reductions: the signed-input rule equals z+ bit-for-bit on all-positive
/// inputs, and the signed-output rule equals z+ bit-for-bit on all-positive
/// pre-activations.
pub fn reduction_suite(trials: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut checked = 0;

    // Input-rule reduction.
    for _ in 0..trials {
        let n_in = rng.gen_range(1..=8);
        let n_out = rng.gen_range(1..=8);
        let d = random_dense(&mut rng, n_in, n_out, 0.0);
        let x = Tensor::new(vec![n_in], (0..n_in).map(|_| rng.gen_range(0.0..2.0)).collect())
            .unwrap();
        let r = Tensor::new(vec![n_out], (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let mut da = DropStats::default();
        let mut db = DropStats::default();
        let a = propagate_input_layer(&d, &x, &r, &mut da).unwrap();
        let b = propagate_dense_zplus(&d, &x, &r, &mut db).unwrap();
        checked += 1;
        if a.data() != b.data() || da != db {
            failures += 1;
        }
    }

    // Output-rule reduction; draw until the pre-activations are all positive.
    let mut done = 0;
    while done < trials {
        let n_in = rng.gen_range(1..=8);
        let n_out = rng.gen_range(1..=8);
        let d = random_dense(&mut rng, n_in, n_out, 0.0);
        let x = Tensor::new(vec![n_in], (0..n_in).map(|_| rng.gen_range(0.0..2.0)).collect())
            .unwrap();
        let all_positive = (0..n_out).all(|j| {
            (0..n_in).map(|i| x.data()[i] * d.w(i, j)).sum::<f64>() > 0.0
        });
        if !all_positive {
            continue;
        }
        let r = Tensor::new(vec![n_out], (0..n_out).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap();
        let mut da = DropStats::default();
        let mut db = DropStats::default();
        let a = propagate_output_layer(&d, &x, &r, &mut da).unwrap();
        let b = propagate_dense_zplus(&d, &x, &r, &mut db).unwrap();
        checked += 1;
        done += 1;
        if a.data() != b.data() {
            failures += 1;
        }
    }

    SuiteReport::finish("reduction", checked, failures, failures as f64, 0.0, String::new())
}

/// Random small conv + spatial softmax + dense network for gradient checks.
fn random_gradient_net(rng: &mut ChaCha8Rng) -> (PolicyNetwork, Tensor, Tensor) {
    let cout = rng.gen_range(1..=2);
    let k = rng.gen_range(2..=3);
    let stride = rng.gen_range(1..=2);
    let padding = if rng.gen_bool(0.5) { Padding::Valid } else { Padding::Same };
    let kernels = Tensor::new(
        vec![k, k, 1, cout],
        (0..k * k * cout).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let conv = Conv2dLayer::new(kernels, stride, padding).unwrap();
    let (h, w) = (6, 6);
    let geo = conv.geometry(h, w).unwrap();
    let config_dim = rng.gen_range(2..=5);
    let hidden = rng.gen_range(3..=6);
    let joints = rng.gen_range(1..=3);
    let d0 = random_dense(rng, 2 * cout + config_dim, hidden, 0.5);
    let d1 = random_dense(rng, hidden, joints, 0.5);
    let net = PolicyNetwork::new(
        (h, w, 1),
        config_dim,
        vec![InputGroup::new("joint_pos", 0, config_dim)],
        vec![
            Layer::Conv2d(conv),
            Layer::Relu,
            Layer::SpatialSoftmax(SpatialSoftmaxLayer {
                rows: geo.out_h,
                cols: geo.out_w,
                channels: cout,
            }),
        ],
        vec![Layer::Dense(d0), Layer::Relu, Layer::Dense(d1)],
    )
    .unwrap();
    let image =
        Tensor::new(vec![h, w, 1], (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let config =
        Tensor::new(vec![config_dim], (0..config_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
    (net, image, config)
}

/// Whether any ReLU pre-activation sits close enough to its kink that a
/// finite-difference probe could cross it.
fn near_relu_kink(net: &PolicyNetwork, trace: &crate::network::ForwardTrace) -> bool {
    let threshold = 1e-3;
    trace
        .vision
        .iter()
        .zip(&net.vision_layers)
        .chain(trace.fusion.iter().zip(&net.fusion_layers))
        .any(|(lt, layer)| {
            matches!(layer, Layer::Relu) && lt.input.data().iter().any(|v| v.abs() < threshold)
        })
}

/// Gradients: analytic backprop matches central finite differences on random
/// small networks including conv and spatial softmax stages.
pub fn gradient_suite(trials: usize, seed: u64) -> SuiteReport {
    gradient_suite_with_tolerance(trials, seed, GRADIENT_REL_TOL, GRADIENT_ABS_TOL)
}

pub fn gradient_suite_with_tolerance(
    trials: usize,
    seed: u64,
    rel_tol: f64,
    abs_tol: f64,
) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0_f64;
    let mut done = 0;
    let mut attempts = 0;
    while done < trials && attempts < trials * 20 {
        attempts += 1;
        let (net, image, config) = random_gradient_net(&mut rng);
        let (_, trace) = network_forward(&net, &image, &config).expect("forward runs");
        // A kink inside the finite-difference window invalidates the oracle
        // for that draw; resample instead of comparing garbage.
        if near_relu_kink(&net, &trace) {
            continue;
        }
        done += 1;
        for j in 0..net.num_joints() {
            let mut seed_vec = Tensor::zeros(vec![net.num_joints()]);
            seed_vec.data_mut()[j] = 1.0;
            let analytic = input_gradients(&net, &trace, &seed_vec, ReluMode::Exact).unwrap();
            let (n_img, n_cfg) = numeric_gradient(&net, &image, &config, j).unwrap();
            for (a, n) in analytic
                .image
                .data()
                .iter()
                .zip(n_img.data())
                .chain(analytic.config.data().iter().zip(n_cfg.data()))
            {
                // err <= max(abs_tol, rel_tol * magnitude), expressed as a
                // floored relative error so one number compares to rel_tol.
                let floor = abs_tol / rel_tol;
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
                worst = worst.max(rel);
                if rel > rel_tol {
                    failures += 1;
                }
            }
        }
    }
    SuiteReport::finish(
        "gradients",
        done,
        failures,
        worst,
        rel_tol,
        format!("{attempts} draws for {done} usable trials"),
    )
}

/// Dense unroll of a conv layer into its implicit [in_total, out_total] map.
pub fn unroll_conv_to_dense(conv: &Conv2dLayer, h: usize, w: usize) -> DenseLayer {
    let geo = conv.geometry(h, w).expect("geometry is valid");
    let in_total = h * w * conv.cin();
    let out_total = geo.out_h * geo.out_w * conv.cout();
    let mut m = vec![0.0; in_total * out_total];
    for oh in 0..geo.out_h {
        for ow in 0..geo.out_w {
            for co in 0..conv.cout() {
                let u = (oh * geo.out_w + ow) * conv.cout() + co;
                for ki in 0..conv.kh() {
                    let Some(ih) = geo.in_row(oh, ki, h, conv.stride) else { continue };
                    for kj in 0..conv.kw() {
                        let Some(iw) = geo.in_col(ow, kj, w, conv.stride) else { continue };
                        for ci in 0..conv.cin() {
                            let i = (ih * w + iw) * conv.cin() + ci;
                            m[i * out_total + u] = conv.k(ki, kj, ci, co);
                        }
                    }
                }
            }
        }
    }
    DenseLayer::new(
        Tensor::new(vec![in_total, out_total], m).unwrap(),
        Tensor::zeros(vec![out_total]),
    )
    .unwrap()
}

/// Conv/unroll oracle: conv z+ propagation equals the z+ rule on the
/// unrolled dense matrix.
pub fn conv_unroll_suite(trials: usize, seed: u64) -> SuiteReport {
    conv_unroll_suite_with_tolerance(trials, seed, CONV_UNROLL_TOL)
}

pub fn conv_unroll_suite_with_tolerance(trials: usize, seed: u64, tol: f64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let k = rng.gen_range(2..=3);
        let stride = rng.gen_range(1..=2);
        let padding = if rng.gen_bool(0.5) { Padding::Valid } else { Padding::Same };
        let cin = rng.gen_range(1..=2);
        let cout = rng.gen_range(1..=2);
        let conv = Conv2dLayer::new(
            Tensor::new(
                vec![k, k, cin, cout],
                (0..k * k * cin * cout).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
            stride,
            padding,
        )
        .unwrap();
        let (h, w) = (6, 6);
        let x = Tensor::new(
            vec![h, w, cin],
            (0..h * w * cin).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let geo = conv.geometry(h, w).unwrap();
        let out_total = geo.out_h * geo.out_w * cout;
        let r_out = Tensor::new(
            vec![geo.out_h, geo.out_w, cout],
            (0..out_total).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();

        let mut d_conv = DropStats::default();
        let got =
            crate::attribution::propagate_conv_zplus(&conv, &x, &r_out, &mut d_conv).unwrap();
        let unrolled = unroll_conv_to_dense(&conv, h, w);
        let mut d_dense = DropStats::default();
        let want = propagate_dense_zplus(
            &unrolled,
            &Tensor::vector(x.data()),
            &Tensor::vector(r_out.data()),
            &mut d_dense,
        )
        .unwrap();

        let mut trial_worst = 0.0_f64;
        for (a, b) in got.data().iter().zip(want.data()) {
            trial_worst = trial_worst.max((a - b).abs());
        }
        trial_worst = trial_worst.max((d_conv.mass - d_dense.mass).abs());
        worst = worst.max(trial_worst);
        if trial_worst > tol || d_conv.count != d_dense.count {
            failures += 1;
        }
    }
    SuiteReport::finish("conv-unroll", trials, failures, worst, tol, String::new())
}

/// Kinematics: the 2-link fixture alpha and the Jacobian-column-norm
/// prediction across random non-degenerate states.
pub fn kinematics_suite(trials: usize, seed: u64) -> SuiteReport {
    kinematics_suite_with_tolerance(trials, seed, KINEMATICS_JACOBIAN_REL_TOL)
}

pub fn kinematics_suite_with_tolerance(trials: usize, seed: u64, jac_tol: f64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0_f64;

    // Fixture: L = [1, 1], I = [1, 1], dt = 0.01 at rest gives [2/3, 1/3].
    let fixture = ArmModel::new(vec![1.0, 1.0], vec![1.0, 1.0], 0.01).unwrap();
    let alpha = importance_factors(&fixture, &ArmState::at_rest(vec![0.0, 0.0]), AlphaMode::Kinematic);
    for (got, want) in alpha.values().iter().zip(&[2.0 / 3.0, 1.0 / 3.0]) {
        let rel = (got - want).abs() / want;
        worst = worst.max(rel);
        if rel > KINEMATICS_FIXTURE_REL_TOL {
            failures += 1;
        }
    }

    // Jacobian-column-norm prediction on random states; degenerate
    // geometries (end-effector almost on a joint) are resampled because a
    // relative comparison against a vanishing norm is meaningless.
    let mut done = 0;
    while done < trials {
        let lengths = vec![rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)];
        let inertia = rng.gen_range(0.5..2.0);
        let dt = rng.gen_range(0.002..=0.01);
        let model = ArmModel::new(lengths, vec![inertia, inertia], dt).unwrap();
        let theta = vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let omega = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let cols = jacobian_columns(&model, &theta);
        let norms: Vec<f64> = cols.iter().map(|c| (c.0 * c.0 + c.1 * c.1).sqrt()).collect();
        if norms.iter().any(|&n| n < 0.1 * model.total_reach()) {
            continue;
        }
        done += 1;
        let state = ArmState { theta, omega };
        let alpha = importance_factors(&model, &state, AlphaMode::Kinematic);
        let total: f64 = norms.iter().sum();
        for (got, n) in alpha.values().iter().zip(&norms) {
            let want = n / total;
            let rel = (got - want).abs() / want;
            worst = worst.max(rel);
            if rel > jac_tol {
                failures += 1;
            }
        }
    }
    SuiteReport::finish("kinematics", trials, failures, worst, jac_tol, String::new())
}

/// Runs the named suite ("all" runs every suite).
pub fn run_suites(name: &str, trials: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    if trials == 0 {
        return Err(Error::config("--trials must be at least 1"));
    }
    let reports = match name {
        "conservation" => vec![conservation_suite(trials, seed)],
        "gradients" => vec![gradient_suite(trials, seed)],
        "kinematics" => vec![kinematics_suite(trials, seed)],
        "reduction" => vec![reduction_suite(trials, seed)],
        "conv-unroll" => vec![conv_unroll_suite(trials, seed)],
        "all" => vec![
            conservation_suite(trials, seed),
            reduction_suite(trials, seed),
            gradient_suite(trials, seed),
            conv_unroll_suite(trials, seed),
            kinematics_suite(trials, seed),
        ],
        other => {
            return Err(Error::config(format!(
                "unknown suite {other:?} (conservation, gradients, kinematics, reduction, conv-unroll, all)"
            )));
        }
    };
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conservation_suite_passes_quickly() {
        let report = conservation_suite(50, 123);
        assert!(report.passed, "{}", report.render());
    }

    #[test]
    fn conservation_holds_through_conv_stages_with_signed_pixels() {
        use crate::attribution::attribute_dtd;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..40 {
            let (net, _, config) = random_gradient_net(&mut rng);
            // Signed pixels exercise the flipped-input conv propagation.
            let image = Tensor::new(
                vec![6, 6, 1],
                (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let alpha = ImportanceFactors::new(
                (0..net.num_joints()).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>(),
            )
            .unwrap();
            let result = attribute_dtd(&net, &image, &config, &alpha).unwrap();
            let scale = result.output_total.max(1e-12);
            assert!(
                result.conservation_error() <= 1e-6 * scale,
                "trial {trial}: conservation error {} vs total {}",
                result.conservation_error(),
                result.output_total
            );
        }
    }

    #[test]
    fn impossible_tolerance_is_detected() {
        // Harness sanity: a tolerance no floating-point implementation can
        // meet must produce a failing report.
        let report = conservation_suite_with_tolerance(50, 123, 0.0);
        assert!(!report.passed);
    }

    #[test]
    fn reduction_suite_passes_quickly() {
        let report = reduction_suite(25, 7);
        assert!(report.passed, "{}", report.render());
    }

    #[test]
    fn conv_unroll_suite_passes_quickly() {
        let report = conv_unroll_suite(10, 99);
        assert!(report.passed, "{}", report.render());
    }

    #[test]
    fn kinematics_suite_passes_quickly() {
        let report = kinematics_suite(10, 5);
        assert!(report.passed, "{}", report.render());
    }

    #[test]
    fn gradient_suite_passes_quickly() {
        let report = gradient_suite(5, 21);
        assert!(report.passed, "{}", report.render());
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_suites("bogus", 1, 0).is_err());
        assert!(run_suites("all", 0, 0).is_err());
    }
}
