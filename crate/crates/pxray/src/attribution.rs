//! Backward relevance propagation from motor torques to the image and
//! configuration inputs.
//!
//! Three backends share one forward trace:
//!
//! * `dtd` — deep Taylor z+ propagation with a sign-aware output rule (the
//!   output layer may produce negative torques) and a sign-aware input rule
//!   (configuration features and feature points may be negative).
//! * `rap` — signed z-rule fractions with a per-layer absolute-value
//!   renormalization, always yielding non-negative relevance.
//! * `gbp` — guided backpropagation times input, run once per joint and
//!   aggregated with the same importance weighting as the other backends.
//!
//! Every rule conserves relevance column-by-column; mass that cannot be
//! redistributed (zero denominators, sign ties) is dropped and tracked so
//! that `sum(input relevance) + dropped == sum_j alpha_j |tau_j|` holds
//! exactly up to rounding.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gradient::{input_gradients, ReluMode};
use crate::network::{
    network_forward, spatial_softmax_weights, Conv2dLayer, DenseLayer, InputGroup, Layer,
    PolicyNetwork, SpatialSoftmaxLayer,
};
use crate::tensor::Tensor;

/// Keeps the spatial-softmax redistribution weights strictly positive.
const COORD_EPSILON: f64 = 1e-12;

/// Per-joint output weights; non-negative, normally normalized to sum 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceFactors {
    values: Vec<f64>,
}

impl ImportanceFactors {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("importance factors must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::contract("importance factors must be finite and non-negative"));
        }
        Ok(ImportanceFactors { values })
    }

    /// The fallback weighting: 1/J per joint.
    pub fn uniform(joints: usize) -> Self {
        ImportanceFactors { values: vec![1.0 / joints as f64; joints] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Attribution backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Dtd,
    Rap,
    Gbp,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Dtd => "dtd",
            Method::Rap => "rap",
            Method::Gbp => "gbp",
        }
    }

    pub const ALL: [Method; 3] = [Method::Dtd, Method::Rap, Method::Gbp];
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dtd" => Ok(Method::Dtd),
            "rap" => Ok(Method::Rap),
            "gbp" => Ok(Method::Gbp),
            other => Err(Error::config(format!("unknown method {other:?} (dtd, rap, gbp)"))),
        }
    }
}

/// Relevance that could not be redistributed, tracked for conservation.
///
/// `count` is the number of drop events (zero-denominator or sign-tie
/// columns). `mass` is the conservation residual: what must be added to the
/// summed input relevance to recover the initial output relevance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DropStats {
    pub count: usize,
    pub mass: f64,
}

/// Per-input relevance plus group aggregates for one observation.
#[derive(Debug, Clone)]
pub struct AttributionResult {
    pub method: Method,
    pub image_relevance: Tensor,
    pub config_relevance: Tensor,
    /// Signed relevance sums: an "image" entry plus one entry per declared
    /// configuration group.
    pub group_totals: BTreeMap<String, f64>,
    /// Absolute-value sums over the same groups (signed and absolute views
    /// differ only when a backend yields negative relevance).
    pub group_totals_abs: BTreeMap<String, f64>,
    /// sum_j alpha_j |tau_j|, the total relevance entering the backward pass.
    pub output_total: f64,
    pub drops: DropStats,
    /// The network's configuration groups, carried along so downstream
    /// emitters can name individual features.
    pub input_groups: Vec<InputGroup>,
}

/// R_j = alpha_j * tau_j. Signs are preserved; the output-layer rule turns
/// each column into a non-negative mass contribution.
pub fn init_output_relevance(torques: &Tensor, alpha: &ImportanceFactors) -> Result<Tensor> {
    if torques.len() != alpha.len() {
        return Err(Error::shape(format!(
            "{} torques but {} importance factors",
            torques.len(),
            alpha.len()
        )));
    }
    Ok(Tensor::vector(
        &torques
            .data()
            .iter()
            .zip(alpha.values())
            .map(|(t, a)| a * t)
            .collect::<Vec<_>>(),
    ))
}

/// Positive/negative parts of the weighted contribution z_ij, optionally
/// sign-flipping negative inputs together with their weights.
#[inline]
fn split_contribution(x: f64, w: f64, signed_inputs: bool) -> (f64, f64) {
    if signed_inputs && x < 0.0 {
        // Flip the input sign and its connected weight: the product z is
        // unchanged, but the positive part becomes x * min(w, 0).
        (x * w.min(0.0), x * w.max(0.0))
    } else {
        (x * w.max(0.0), x * w.min(0.0))
    }
}

/// Shared column-wise dense propagation engine behind the public rules.
///
/// `signed_inputs` selects the flipped-negative-input numerators;
/// `signed_outputs` selects the two-branch output rule keyed on the sign of
/// the bias-free pre-activation. Drop mass is accounted against `sum R_j`
/// for plain rules and against `sum |R_j|` for the output rule.
fn propagate_dense_rule(
    dense: &DenseLayer,
    x: &Tensor,
    r_out: &Tensor,
    signed_inputs: bool,
    signed_outputs: bool,
    drops: &mut DropStats,
) -> Result<Tensor> {
    let (n_in, n_out) = (dense.in_dim(), dense.out_dim());
    if x.shape() != [n_in] {
        return Err(Error::shape(format!("rule expects input [{n_in}], got {:?}", x.shape())));
    }
    if r_out.shape() != [n_out] {
        return Err(Error::shape(format!(
            "rule expects relevance [{n_out}], got {:?}",
            r_out.shape()
        )));
    }
    let mut r_in = vec![0.0; n_in];
    for j in 0..n_out {
        let rj = r_out.data()[j];
        let mut pos_sum = 0.0;
        let mut neg_sum = 0.0;
        let mut full_sum = 0.0;
        for i in 0..n_in {
            let (p, n) = split_contribution(x.data()[i], dense.w(i, j), signed_inputs);
            pos_sum += p;
            neg_sum += n;
            full_sum += x.data()[i] * dense.w(i, j);
        }
        if signed_outputs {
            if full_sum > 0.0 && pos_sum > 0.0 {
                for i in 0..n_in {
                    let (p, _) = split_contribution(x.data()[i], dense.w(i, j), signed_inputs);
                    r_in[i] += p / pos_sum * rj;
                }
                drops.mass += rj.abs() - rj;
            } else if full_sum < 0.0 && neg_sum < 0.0 {
                for i in 0..n_in {
                    let (_, n) = split_contribution(x.data()[i], dense.w(i, j), signed_inputs);
                    r_in[i] -= n / neg_sum * rj;
                }
                drops.mass += rj.abs() + rj;
            } else {
                // Sign tie: the column cannot choose a branch.
                drops.count += 1;
                drops.mass += rj.abs();
            }
        } else if pos_sum > 0.0 {
            for i in 0..n_in {
                let (p, _) = split_contribution(x.data()[i], dense.w(i, j), signed_inputs);
                r_in[i] += p / pos_sum * rj;
            }
        } else {
            drops.count += 1;
            drops.mass += rj;
        }
    }
    Ok(Tensor::vector(&r_in))
}

/// Output-layer rule: redistribute with z+ fractions when the bias-free
/// pre-activation is positive and with z- fractions (sign-flipped) when it
/// is negative, so each column injects |R_j| of mass.
pub fn propagate_output_layer(
    dense: &DenseLayer,
    x: &Tensor,
    r_out: &Tensor,
    drops: &mut DropStats,
) -> Result<Tensor> {
    require_non_negative(x, "propagate_output_layer")?;
    propagate_dense_rule(dense, x, r_out, false, true, drops)
}

/// Plain z+ rule for hidden dense layers with non-negative inputs.
pub fn propagate_dense_zplus(
    dense: &DenseLayer,
    x: &Tensor,
    r_out: &Tensor,
    drops: &mut DropStats,
) -> Result<Tensor> {
    require_non_negative(x, "propagate_dense_zplus")?;
    propagate_dense_rule(dense, x, r_out, false, false, drops)
}

/// Signed-input rule: negative inputs have their sign and their connected
/// weights' signs flipped, which reduces to the z+ rule when every input is
/// non-negative.
pub fn propagate_input_layer(
    dense: &DenseLayer,
    x: &Tensor,
    r_out: &Tensor,
    drops: &mut DropStats,
) -> Result<Tensor> {
    propagate_dense_rule(dense, x, r_out, true, false, drops)
}

fn require_non_negative(x: &Tensor, rule: &str) -> Result<()> {
    if x.data().iter().any(|&v| v < 0.0) {
        return Err(Error::contract(format!(
            "{rule} requires non-negative inputs; use the signed-input rule instead"
        )));
    }
    Ok(())
}

/// ReLU handling inside the vision chain. A ReLU feeding a z-rule layer
/// satisfies the strict zero-where-inactive contract; the ReLU feeding the
/// spatial softmax does not, because the softmax assigns positive attention
/// weight to every pixel including inactive ones, so there the relevance
/// passes through unchecked.
fn relu_passthrough(net: &PolicyNetwork, li: usize, x_pre: &Tensor, r: &Tensor) -> Result<Tensor> {
    if matches!(net.vision_layers.get(li + 1), Some(Layer::SpatialSoftmax(_))) {
        Ok(r.clone())
    } else {
        propagate_relu(x_pre, r)
    }
}

/// ReLU stages pass relevance through unchanged; positions with inactive
/// units must already carry zero relevance.
pub fn propagate_relu(x_pre: &Tensor, r_out: &Tensor) -> Result<Tensor> {
    if x_pre.shape() != r_out.shape() {
        return Err(Error::shape(format!(
            "relu pre-activation shape {:?} vs relevance shape {:?}",
            x_pre.shape(),
            r_out.shape()
        )));
    }
    for (i, (&pre, &r)) in x_pre.data().iter().zip(r_out.data()).enumerate() {
        if pre <= 0.0 && r != 0.0 {
            return Err(Error::contract(format!(
                "relevance {r} at position {i} where the relu pre-activation is {pre}"
            )));
        }
    }
    Ok(r_out.clone())
}

/// Redistributes each channel's feature-point relevance over its pixels,
/// weighting by the softmax attention times the coordinate magnitude.
/// Conservation per channel is exact by construction.
pub fn propagate_spatial_softmax(
    layer: &SpatialSoftmaxLayer,
    x: &Tensor,
    r_points: &Tensor,
) -> Result<Tensor> {
    if x.shape() != [layer.rows, layer.cols, layer.channels] {
        return Err(Error::shape(format!(
            "spatial softmax expects [{},{},{}], got {:?}",
            layer.rows, layer.cols, layer.channels,
            x.shape()
        )));
    }
    if r_points.shape() != [layer.out_dim()] {
        return Err(Error::shape(format!(
            "expected {} feature-point relevances, got {:?}",
            layer.out_dim(),
            r_points.shape()
        )));
    }
    let s = spatial_softmax_weights(layer, x);
    let mut out = Tensor::zeros(vec![layer.rows, layer.cols, layer.channels]);
    for c in 0..layer.channels {
        let r_channel = r_points.data()[2 * c] + r_points.data()[2 * c + 1];
        let mut denom = 0.0;
        for r in 0..layer.rows {
            for col in 0..layer.cols {
                let sp = s.data()[s.idx3(r, col, c)];
                denom += sp * (layer.px(col).abs() + layer.py(r).abs() + COORD_EPSILON);
            }
        }
        for r in 0..layer.rows {
            for col in 0..layer.cols {
                let sp = s.data()[s.idx3(r, col, c)];
                let w = sp * (layer.px(col).abs() + layer.py(r).abs() + COORD_EPSILON) / denom;
                let i = out.idx3(r, col, c);
                out.data_mut()[i] = w * r_channel;
            }
        }
    }
    Ok(out)
}

/// Conv propagation engine; a convolution is a sparse linear map, so this is
/// the dense rule applied to the implicit unrolled matrix.
fn propagate_conv_rule(
    conv: &Conv2dLayer,
    x: &Tensor,
    r_out: &Tensor,
    signed_inputs: bool,
    drops: &mut DropStats,
) -> Result<Tensor> {
    let [h, w, cin] = *x.shape() else {
        return Err(Error::shape(format!("conv rule expects [H,W,C] input, got {:?}", x.shape())));
    };
    if cin != conv.cin() {
        return Err(Error::shape(format!(
            "conv rule expects {} channels, got {cin}",
            conv.cin()
        )));
    }
    let geo = conv.geometry(h, w)?;
    if r_out.shape() != [geo.out_h, geo.out_w, conv.cout()] {
        return Err(Error::shape(format!(
            "conv rule expects relevance [{}, {}, {}], got {:?}",
            geo.out_h,
            geo.out_w,
            conv.cout(),
            r_out.shape()
        )));
    }
    let mut r_in = Tensor::zeros(x.shape().to_vec());
    for oh in 0..geo.out_h {
        for ow in 0..geo.out_w {
            for co in 0..conv.cout() {
                let rj = r_out.data()[r_out.idx3(oh, ow, co)];
                let mut pos_sum = 0.0;
                for ki in 0..conv.kh() {
                    let Some(ih) = geo.in_row(oh, ki, h, conv.stride) else { continue };
                    for kj in 0..conv.kw() {
                        let Some(iw) = geo.in_col(ow, kj, w, conv.stride) else { continue };
                        for ci in 0..cin {
                            let (p, _) = split_contribution(
                                x.data()[x.idx3(ih, iw, ci)],
                                conv.k(ki, kj, ci, co),
                                signed_inputs,
                            );
                            pos_sum += p;
                        }
                    }
                }
                if pos_sum <= 0.0 {
                    drops.count += 1;
                    drops.mass += rj;
                    continue;
                }
                for ki in 0..conv.kh() {
                    let Some(ih) = geo.in_row(oh, ki, h, conv.stride) else { continue };
                    for kj in 0..conv.kw() {
                        let Some(iw) = geo.in_col(ow, kj, w, conv.stride) else { continue };
                        for ci in 0..cin {
                            let (p, _) = split_contribution(
                                x.data()[x.idx3(ih, iw, ci)],
                                conv.k(ki, kj, ci, co),
                                signed_inputs,
                            );
                            let i = r_in.idx3(ih, iw, ci);
                            r_in.data_mut()[i] += p / pos_sum * rj;
                        }
                    }
                }
            }
        }
    }
    Ok(r_in)
}

/// z+ rule over a convolution's implicit linear map.
pub fn propagate_conv_zplus(
    conv: &Conv2dLayer,
    x: &Tensor,
    r_out: &Tensor,
    drops: &mut DropStats,
) -> Result<Tensor> {
    propagate_conv_rule(conv, x, r_out, false, drops)
}

fn check_alpha(net: &PolicyNetwork, alpha: &ImportanceFactors) -> Result<()> {
    if alpha.len() != net.num_joints() {
        return Err(Error::shape(format!(
            "{} importance factors for a {}-joint network",
            alpha.len(),
            net.num_joints()
        )));
    }
    Ok(())
}

fn output_total(torques: &Tensor, alpha: &ImportanceFactors) -> f64 {
    torques.data().iter().zip(alpha.values()).map(|(t, a)| a * t.abs()).sum()
}

fn assemble(
    net: &PolicyNetwork,
    method: Method,
    image_relevance: Tensor,
    config_relevance: Tensor,
    output_total: f64,
    drops: DropStats,
) -> AttributionResult {
    let mut group_totals = BTreeMap::new();
    let mut group_totals_abs = BTreeMap::new();
    group_totals.insert("image".to_string(), image_relevance.sum());
    group_totals_abs.insert("image".to_string(), image_relevance.abs_sum());
    for g in &net.input_groups {
        let slice = &config_relevance.data()[g.lo..g.hi];
        group_totals.insert(g.name.clone(), slice.iter().sum());
        group_totals_abs.insert(g.name.clone(), slice.iter().map(|v| v.abs()).sum());
    }
    AttributionResult {
        method,
        image_relevance,
        config_relevance,
        group_totals,
        group_totals_abs,
        output_total,
        drops,
        input_groups: net.input_groups.clone(),
    }
}

/// Deep Taylor decomposition over the full pipeline: sign-aware output rule,
/// z+ through hidden dense layers, signed-input rule at the concat (feature
/// points and configuration entries may be negative), the spatial-softmax
/// redistribution, and the conv chain down to pixels.
pub fn attribute_dtd(
    net: &PolicyNetwork,
    image: &Tensor,
    config: &Tensor,
    alpha: &ImportanceFactors,
) -> Result<AttributionResult> {
    check_alpha(net, alpha)?;
    let (torques, trace) = network_forward(net, image, config)?;
    let total = output_total(&torques, alpha);
    let mut drops = DropStats::default();
    let mut r = init_output_relevance(&torques, alpha)?;

    let last = net.fusion_layers.len() - 1;
    for (li, layer) in net.fusion_layers.iter().enumerate().rev() {
        let lt = &trace.fusion[li];
        match layer {
            Layer::Dense(d) => {
                // The concat input (index 0) and any dense input not guarded
                // by a ReLU may be signed; post-ReLU inputs use plain z+.
                let signed_inputs =
                    li == 0 || !matches!(net.fusion_layers[li - 1], Layer::Relu);
                r = if li == last {
                    propagate_dense_rule(d, &lt.input, &r, signed_inputs, true, &mut drops)?
                } else {
                    propagate_dense_rule(d, &lt.input, &r, signed_inputs, false, &mut drops)?
                };
            }
            Layer::Relu => r = propagate_relu(&lt.input, &r)?,
            other => return Err(Error::shape(format!("unexpected fusion layer {other:?}"))),
        }
    }

    let feat_dim = net.feature_dim();
    let config_relevance = Tensor::vector(&r.data()[feat_dim..]);
    let mut r_map = Tensor::vector(&r.data()[..feat_dim]);
    for (li, layer) in net.vision_layers.iter().enumerate().rev() {
        let lt = &trace.vision[li];
        match layer {
            Layer::SpatialSoftmax(ss) => {
                r_map = propagate_spatial_softmax(ss, &lt.input, &r_map)?;
            }
            // Signed-input numerators reduce to z+ on the non-negative
            // activations this pipeline produces, and stay correct if a
            // renderer ever yields signed pixels.
            Layer::Conv2d(c) => r_map = propagate_conv_rule(c, &lt.input, &r_map, true, &mut drops)?,
            Layer::Relu => r_map = relu_passthrough(net, li, &lt.input, &r_map)?,
            other => return Err(Error::shape(format!("unexpected vision layer {other:?}"))),
        }
    }

    Ok(assemble(net, Method::Dtd, r_map, config_relevance, total, drops))
}

/// Guided backpropagation times input, one guided pass per joint seeded with
/// the gradient of alpha_j |tau_j| so magnitudes aggregate across joints.
pub fn attribute_gbp(
    net: &PolicyNetwork,
    image: &Tensor,
    config: &Tensor,
    alpha: &ImportanceFactors,
) -> Result<AttributionResult> {
    check_alpha(net, alpha)?;
    let (torques, trace) = network_forward(net, image, config)?;
    let total = output_total(&torques, alpha);

    let mut image_grad = Tensor::zeros(image.shape().to_vec());
    let mut config_grad = Tensor::zeros(config.shape().to_vec());
    for j in 0..net.num_joints() {
        let seed_value = alpha.values()[j] * torques.data()[j].signum();
        if torques.data()[j] == 0.0 || seed_value == 0.0 {
            continue;
        }
        let mut seed = Tensor::zeros(vec![net.num_joints()]);
        seed.data_mut()[j] = seed_value;
        let g = input_gradients(net, &trace, &seed, ReluMode::Guided)?;
        for (acc, v) in image_grad.data_mut().iter_mut().zip(g.image.data()) {
            *acc += v;
        }
        for (acc, v) in config_grad.data_mut().iter_mut().zip(g.config.data()) {
            *acc += v;
        }
    }

    let image_relevance = Tensor::new(
        image.shape().to_vec(),
        image_grad.data().iter().zip(image.data()).map(|(g, x)| g * x).collect(),
    )?;
    let config_relevance = Tensor::new(
        config.shape().to_vec(),
        config_grad.data().iter().zip(config.data()).map(|(g, x)| g * x).collect(),
    )?;
    Ok(assemble(net, Method::Gbp, image_relevance, config_relevance, total, DropStats::default()))
}

/// Signed z-rule fractions followed by an absolute-value renormalization per
/// parameterized layer, starting from alpha_j |tau_j| at the output.
pub fn attribute_rap(
    net: &PolicyNetwork,
    image: &Tensor,
    config: &Tensor,
    alpha: &ImportanceFactors,
) -> Result<AttributionResult> {
    check_alpha(net, alpha)?;
    let (torques, trace) = network_forward(net, image, config)?;
    let total = output_total(&torques, alpha);
    let mut drops = DropStats::default();

    let mut r = Tensor::vector(
        &torques
            .data()
            .iter()
            .zip(alpha.values())
            .map(|(t, a)| a * t.abs())
            .collect::<Vec<_>>(),
    );
    let mut running = total;

    for (li, layer) in net.fusion_layers.iter().enumerate().rev() {
        let lt = &trace.fusion[li];
        match layer {
            Layer::Dense(d) => {
                r = rap_dense_step(d, &lt.input, &r, &mut running, &mut drops)?;
            }
            Layer::Relu => r = propagate_relu(&lt.input, &r)?,
            other => return Err(Error::shape(format!("unexpected fusion layer {other:?}"))),
        }
    }

    let feat_dim = net.feature_dim();
    let config_relevance = Tensor::vector(&r.data()[feat_dim..]);
    let mut r_map = Tensor::vector(&r.data()[..feat_dim]);
    // The vision branch carries its own share of the running total from the
    // concat split onward.
    let mut vision_running = r_map.sum();
    for (li, layer) in net.vision_layers.iter().enumerate().rev() {
        let lt = &trace.vision[li];
        match layer {
            Layer::SpatialSoftmax(ss) => {
                r_map = propagate_spatial_softmax(ss, &lt.input, &r_map)?;
            }
            Layer::Conv2d(c) => {
                r_map = rap_conv_step(c, &lt.input, &r_map, &mut vision_running, &mut drops)?;
            }
            Layer::Relu => r_map = relu_passthrough(net, li, &lt.input, &r_map)?,
            other => return Err(Error::shape(format!("unexpected vision layer {other:?}"))),
        }
    }

    Ok(assemble(net, Method::Rap, r_map, config_relevance, total, drops))
}

/// One RAP dense step: signed z fractions, absolute value, renormalize the
/// layer so its total matches the non-dropped incoming mass.
fn rap_dense_step(
    dense: &DenseLayer,
    x: &Tensor,
    r_out: &Tensor,
    running: &mut f64,
    drops: &mut DropStats,
) -> Result<Tensor> {
    let (n_in, n_out) = (dense.in_dim(), dense.out_dim());
    if x.shape() != [n_in] || r_out.shape() != [n_out] {
        return Err(Error::shape(format!(
            "rap step expects input [{n_in}] and relevance [{n_out}], got {:?} and {:?}",
            x.shape(),
            r_out.shape()
        )));
    }
    let mut raw = vec![0.0; n_in];
    for j in 0..n_out {
        let rj = r_out.data()[j];
        let denom: f64 = (0..n_in).map(|i| x.data()[i] * dense.w(i, j)).sum();
        if denom == 0.0 {
            drops.count += 1;
            drops.mass += rj;
            *running -= rj;
            continue;
        }
        for (i, ri) in raw.iter_mut().enumerate() {
            *ri += x.data()[i] * dense.w(i, j) / denom * rj;
        }
    }
    renormalize_abs(&mut raw, running, drops);
    Ok(Tensor::vector(&raw))
}

fn rap_conv_step(
    conv: &Conv2dLayer,
    x: &Tensor,
    r_out: &Tensor,
    running: &mut f64,
    drops: &mut DropStats,
) -> Result<Tensor> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let geo = conv.geometry(h, w)?;
    if r_out.shape() != [geo.out_h, geo.out_w, conv.cout()] {
        return Err(Error::shape(format!(
            "rap conv step expects relevance [{}, {}, {}], got {:?}",
            geo.out_h,
            geo.out_w,
            conv.cout(),
            r_out.shape()
        )));
    }
    let mut raw = Tensor::zeros(x.shape().to_vec());
    for oh in 0..geo.out_h {
        for ow in 0..geo.out_w {
            for co in 0..conv.cout() {
                let rj = r_out.data()[r_out.idx3(oh, ow, co)];
                let mut denom = 0.0;
                for ki in 0..conv.kh() {
                    let Some(ih) = geo.in_row(oh, ki, h, conv.stride) else { continue };
                    for kj in 0..conv.kw() {
                        let Some(iw) = geo.in_col(ow, kj, w, conv.stride) else { continue };
                        for ci in 0..conv.cin() {
                            denom += x.data()[x.idx3(ih, iw, ci)] * conv.k(ki, kj, ci, co);
                        }
                    }
                }
                if denom == 0.0 {
                    drops.count += 1;
                    drops.mass += rj;
                    *running -= rj;
                    continue;
                }
                for ki in 0..conv.kh() {
                    let Some(ih) = geo.in_row(oh, ki, h, conv.stride) else { continue };
                    for kj in 0..conv.kw() {
                        let Some(iw) = geo.in_col(ow, kj, w, conv.stride) else { continue };
                        for ci in 0..conv.cin() {
                            let z = x.data()[x.idx3(ih, iw, ci)] * conv.k(ki, kj, ci, co);
                            let i = raw.idx3(ih, iw, ci);
                            raw.data_mut()[i] += z / denom * rj;
                        }
                    }
                }
            }
        }
    }
    renormalize_abs(raw.data_mut(), running, drops);
    Ok(raw)
}

fn renormalize_abs(raw: &mut [f64], running: &mut f64, drops: &mut DropStats) {
    let abs_total: f64 = raw.iter().map(|v| v.abs()).sum();
    if abs_total == 0.0 {
        // Nothing survived the layer; whatever mass was inbound is gone.
        if *running != 0.0 {
            drops.count += 1;
            drops.mass += *running;
            *running = 0.0;
        }
        raw.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let scale = *running / abs_total;
    for v in raw.iter_mut() {
        *v = v.abs() * scale;
    }
}

/// Runs one attribution backend.
pub fn attribute(
    method: Method,
    net: &PolicyNetwork,
    image: &Tensor,
    config: &Tensor,
    alpha: &ImportanceFactors,
) -> Result<AttributionResult> {
    match method {
        Method::Dtd => attribute_dtd(net, image, config, alpha),
        Method::Rap => attribute_rap(net, image, config, alpha),
        Method::Gbp => attribute_gbp(net, image, config, alpha),
    }
}

impl AttributionResult {
    /// Signed total over every input feature.
    pub fn total_relevance(&self) -> f64 {
        self.image_relevance.sum() + self.config_relevance.sum()
    }

    /// Conservation residual |total + dropped - output_total|.
    pub fn conservation_error(&self) -> f64 {
        (self.total_relevance() + self.drops.mass - self.output_total).abs()
    }
}
