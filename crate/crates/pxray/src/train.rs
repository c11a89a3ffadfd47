//! Behavioral cloning: fit a policy network to (observation, expert torque)
//! pairs with mini-batch gradient descent over the engine's analytic
//! gradients. Deterministic given the seed.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Sample;
use crate::error::{Error, Result};
use crate::gradient::{accumulate_gradients, LayerGrad, ParamGradients};
use crate::network::{
    network_forward, Conv2dLayer, DenseLayer, InputGroup, Layer, Padding, PolicyNetwork,
    SpatialSoftmaxLayer,
};
use crate::tensor::Tensor;

/// Cloning target: final MSE below this fraction of the dataset's torque
/// variance (measured on the bundled toy configuration).
pub const MSE_VARIANCE_FRACTION: f64 = 0.10;

/// One convolution stage of an architecture description; a ReLU follows
/// every stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvSpec {
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: String,
}

/// Network architecture description, loadable from JSON.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchSpec {
    pub image_shape: [usize; 3],
    pub config_dim: usize,
    pub input_groups: BTreeMap<String, [usize; 2]>,
    pub convs: Vec<ConvSpec>,
    pub fusion_hidden: Vec<usize>,
    pub joints: usize,
}

impl ArchSpec {
    /// The bundled toy architecture for a J-joint arm observing 32x32 images.
    pub fn toy(joints: usize) -> Self {
        let j = joints;
        let mut input_groups = BTreeMap::new();
        input_groups.insert("joint_pos".to_string(), [0, j]);
        input_groups.insert("joint_vel".to_string(), [j, 2 * j]);
        input_groups.insert("ee_pos".to_string(), [2 * j, 2 * j + 2]);
        input_groups.insert("ee_vel".to_string(), [2 * j + 2, 2 * j + 4]);
        ArchSpec {
            image_shape: [32, 32, 1],
            config_dim: 2 * j + 4,
            input_groups,
            convs: vec![
                ConvSpec { kh: 5, kw: 5, cout: 3, stride: 2, padding: "valid".to_string() },
                ConvSpec { kh: 3, kw: 3, cout: 3, stride: 2, padding: "valid".to_string() },
            ],
            fusion_hidden: vec![24, 24],
            joints,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let source =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&source).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    /// Builds the network with Glorot-uniform weights drawn from the seed.
    pub fn build(&self, seed: u64) -> Result<PolicyNetwork> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut h, mut w, mut c) = (self.image_shape[0], self.image_shape[1], self.image_shape[2]);
        let mut vision = Vec::new();
        for spec in &self.convs {
            let padding = match spec.padding.as_str() {
                "valid" => Padding::Valid,
                "same" => Padding::Same,
                other => {
                    return Err(Error::config(format!("unknown padding {other:?} (valid, same)")));
                }
            };
            let fan_in = (spec.kh * spec.kw * c) as f64;
            let fan_out = (spec.kh * spec.kw * spec.cout) as f64;
            let limit = (6.0 / (fan_in + fan_out)).sqrt();
            let kernels = Tensor::new(
                vec![spec.kh, spec.kw, c, spec.cout],
                (0..spec.kh * spec.kw * c * spec.cout)
                    .map(|_| rng.gen_range(-limit..limit))
                    .collect(),
            )?;
            let conv = Conv2dLayer::new(kernels, spec.stride, padding)?;
            let geo = conv.geometry(h, w)?;
            h = geo.out_h;
            w = geo.out_w;
            c = spec.cout;
            vision.push(Layer::Conv2d(conv));
            vision.push(Layer::Relu);
        }
        vision.push(Layer::SpatialSoftmax(SpatialSoftmaxLayer { rows: h, cols: w, channels: c }));

        let mut fusion = Vec::new();
        let mut dim = 2 * c + self.config_dim;
        for &hidden in &self.fusion_hidden {
            fusion.push(Layer::Dense(glorot_dense(&mut rng, dim, hidden)?));
            fusion.push(Layer::Relu);
            dim = hidden;
        }
        fusion.push(Layer::Dense(glorot_dense(&mut rng, dim, self.joints)?));

        let groups = self
            .input_groups
            .iter()
            .map(|(name, r)| InputGroup::new(name.clone(), r[0], r[1]))
            .collect();
        PolicyNetwork::new(
            (self.image_shape[0], self.image_shape[1], self.image_shape[2]),
            self.config_dim,
            groups,
            vision,
            fusion,
        )
    }
}

fn glorot_dense(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Result<DenseLayer> {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let weights = Tensor::new(
        vec![in_dim, out_dim],
        (0..in_dim * out_dim).map(|_| rng.gen_range(-limit..limit)).collect(),
    )?;
    DenseLayer::new(weights, Tensor::zeros(vec![out_dim]))
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop early once the full-dataset MSE drops below this value.
    pub target_mse: Option<f64>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 0.02,
            momentum: 0.9,
            epochs: 300,
            batch_size: 32,
            target_mse: None,
        }
    }
}

/// Summary of one training run, serializable as the training report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    pub samples: usize,
    pub epochs_run: usize,
    pub final_mse: f64,
    pub torque_variance: f64,
    pub seed: u64,
}

impl TrainingReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Fits a fresh network of the given architecture to the dataset and
/// returns it with the training report.
pub fn clone_policy(
    dataset: &[Sample],
    arch: &ArchSpec,
    hp: &Hyperparams,
    seed: u64,
) -> Result<(PolicyNetwork, TrainingReport)> {
    if dataset.is_empty() {
        return Err(Error::config("empty training dataset"));
    }
    let mut net = arch.build(seed)?;
    for s in dataset {
        if s.torque.len() != arch.joints {
            return Err(Error::config(format!(
                "dataset torque has {} entries, network has {} joints",
                s.torque.len(),
                arch.joints
            )));
        }
    }

    let mut velocity = ParamGradients::zeros_like(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epochs_run = 0;

    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hp.batch_size.max(1)) {
            let mut grads = ParamGradients::zeros_like(&net);
            let scale = 1.0 / (batch.len() * arch.joints) as f64;
            for &idx in batch {
                let s = &dataset[idx];
                let (torques, trace) =
                    network_forward(&net, &s.observation.image, &s.observation.config)?;
                let residual: Vec<f64> = torques
                    .data()
                    .iter()
                    .zip(&s.torque)
                    .map(|(p, t)| p - t)
                    .collect();
                epoch_loss += residual.iter().map(|r| r * r).sum::<f64>() * scale;
                let out_grad =
                    Tensor::vector(&residual.iter().map(|r| 2.0 * r * scale).collect::<Vec<_>>());
                accumulate_gradients(&net, &trace, &out_grad, &mut grads)?;
            }
            if !epoch_loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    detail: format!("loss became non-finite ({epoch_loss})"),
                });
            }
            apply_momentum_update(&mut net, &grads, &mut velocity, hp);
        }
        epochs_run = epoch + 1;
        if let Some(target) = hp.target_mse {
            if evaluate_mse(&net, dataset)? < target {
                break;
            }
        }
    }

    let final_mse = evaluate_mse(&net, dataset)?;
    if !final_mse.is_finite() {
        return Err(Error::Training {
            epoch: epochs_run,
            detail: format!("final loss is non-finite ({final_mse})"),
        });
    }
    let report = TrainingReport {
        samples: dataset.len(),
        epochs_run,
        final_mse,
        torque_variance: torque_variance(dataset),
        seed,
    };
    Ok((net, report))
}

/// Mean squared torque error over the dataset (mean over samples and joints).
pub fn evaluate_mse(net: &PolicyNetwork, dataset: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for s in dataset {
        let (torques, _) = network_forward(net, &s.observation.image, &s.observation.config)?;
        for (p, t) in torques.data().iter().zip(&s.torque) {
            total += (p - t) * (p - t);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Pooled per-joint variance of the expert torques, the baseline the MSE is
/// judged against.
pub fn torque_variance(dataset: &[Sample]) -> f64 {
    if dataset.is_empty() {
        return 0.0;
    }
    let joints = dataset[0].torque.len();
    let n = dataset.len() as f64;
    let mut var = 0.0;
    for j in 0..joints {
        let mean: f64 = dataset.iter().map(|s| s.torque[j]).sum::<f64>() / n;
        var += dataset.iter().map(|s| (s.torque[j] - mean).powi(2)).sum::<f64>() / n;
    }
    var / joints as f64
}

fn apply_momentum_update(
    net: &mut PolicyNetwork,
    grads: &ParamGradients,
    velocity: &mut ParamGradients,
    hp: &Hyperparams,
) {
    update_layers(&mut net.vision_layers, &grads.vision, &mut velocity.vision, hp);
    update_layers(&mut net.fusion_layers, &grads.fusion, &mut velocity.fusion, hp);
}

fn update_layers(
    layers: &mut [Layer],
    grads: &[LayerGrad],
    velocity: &mut [LayerGrad],
    hp: &Hyperparams,
) {
    for ((layer, grad), vel) in layers.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        match (layer, grad, vel) {
            (
                Layer::Dense(d),
                LayerGrad::Dense { weights: gw, bias: gb },
                LayerGrad::Dense { weights: vw, bias: vb },
            ) => {
                step_tensor(&mut d.weights, gw, vw, hp);
                step_tensor(&mut d.bias, gb, vb, hp);
            }
            (
                Layer::Conv2d(c),
                LayerGrad::Conv2d { kernels: gk },
                LayerGrad::Conv2d { kernels: vk },
            ) => {
                step_tensor(&mut c.kernels, gk, vk, hp);
            }
            _ => {}
        }
    }
}

fn step_tensor(param: &mut Tensor, grad: &Tensor, vel: &mut Tensor, hp: &Hyperparams) {
    for ((p, g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(vel.data_mut())
    {
        *v = hp.momentum * *v - hp.learning_rate * g;
        *p += *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{collect_dataset, default_arm, EpisodeConfig, Gains, Observation};

    fn tiny_arch() -> ArchSpec {
        let mut arch = ArchSpec::toy(2);
        arch.image_shape = [8, 8, 1];
        arch.convs = vec![ConvSpec {
            kh: 3,
            kw: 3,
            cout: 2,
            stride: 2,
            padding: "valid".to_string(),
        }];
        arch.fusion_hidden = vec![8];
        arch
    }

    fn constant_dataset() -> Vec<Sample> {
        let mut image = Tensor::zeros(vec![8, 8, 1]);
        let i = image.idx3(2, 5, 0);
        image.data_mut()[i] = 1.0;
        let config = Tensor::vector(&[0.3, -0.2, 0.1, 0.0, 0.5, 0.5, 0.0, 0.0]);
        let sample = Sample {
            observation: Observation { image, config },
            torque: vec![0.8, -0.4],
        };
        vec![sample; 16]
    }

    #[test]
    fn memorizes_a_constant_dataset() {
        let dataset = constant_dataset();
        let hp = Hyperparams {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 200,
            batch_size: 8,
            target_mse: Some(1e-8),
        };
        let (net, report) = clone_policy(&dataset, &tiny_arch(), &hp, 3).unwrap();
        assert!(report.final_mse < 1e-6, "final mse {}", report.final_mse);
        let (torques, _) = network_forward(
            &net,
            &dataset[0].observation.image,
            &dataset[0].observation.config,
        )
        .unwrap();
        assert!((torques.data()[0] - 0.8).abs() < 1e-2);
        assert!((torques.data()[1] + 0.4).abs() < 1e-2);
    }

    #[test]
    fn training_is_deterministic_given_the_seed() {
        let arm = default_arm();
        let mut episodes = EpisodeConfig::default_toy();
        episodes.steps = 30;
        let dataset = collect_dataset(&arm, &episodes, &Gains::default(), (8, 8), 3, 1).unwrap();
        let arch = tiny_arch();
        let hp = Hyperparams { epochs: 5, ..Hyperparams::default() };
        let (a, _) = clone_policy(&dataset, &arch, &hp, 11).unwrap();
        let (b, _) = clone_policy(&dataset, &arch, &hp, 11).unwrap();
        assert_eq!(a, b);
        let json_a = crate::weights::serialize_network(&a).unwrap();
        let json_b = crate::weights::serialize_network(&b).unwrap();
        assert_eq!(json_a, json_b);
    }

    #[test]
    fn divergent_learning_rate_reports_training_error() {
        let dataset = constant_dataset();
        let hp = Hyperparams {
            learning_rate: 1e6,
            momentum: 0.9,
            epochs: 50,
            batch_size: 8,
            target_mse: None,
        };
        match clone_policy(&dataset, &tiny_arch(), &hp, 3) {
            Err(Error::Training { .. }) => {}
            other => panic!("expected training divergence, got {other:?}"),
        }
    }

    #[test]
    fn arch_spec_round_trips_through_json() {
        let arch = ArchSpec::toy(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("arch.json");
        std::fs::write(&path, serde_json::to_string(&arch).unwrap()).unwrap();
        let back = ArchSpec::load(&path).unwrap();
        assert_eq!(arch, back);
    }
}
