//! Analytic gradients over a cached forward trace, plus the central
//! finite-difference oracle used to validate them.
//!
//! The same backward walk serves three consumers: gradient checking, guided
//! backpropagation (which masks ReLU stages), and behavioral-cloning
//! training (which also needs parameter gradients).

use crate::error::{Error, Result};
use crate::network::{
    spatial_softmax_weights, Conv2dLayer, DenseLayer, ForwardTrace, Layer, PolicyNetwork,
    SpatialSoftmaxLayer,
};
use crate::tensor::Tensor;

/// How ReLU stages treat the incoming gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReluMode {
    /// True derivative: pass where the pre-activation was positive.
    Exact,
    /// Guided backpropagation: additionally zero negative incoming gradients.
    Guided,
}

/// Gradients of a scalar loss with respect to the two network inputs.
#[derive(Debug, Clone)]
pub struct InputGradients {
    pub image: Tensor,
    pub config: Tensor,
}

/// Per-layer parameter gradients, parallel to the network's layer lists.
#[derive(Debug, Clone)]
pub enum LayerGrad {
    Dense { weights: Tensor, bias: Tensor },
    Conv2d { kernels: Tensor },
    None,
}

/// Gradient accumulator matching a network's parameter structure.
#[derive(Debug, Clone)]
pub struct ParamGradients {
    pub vision: Vec<LayerGrad>,
    pub fusion: Vec<LayerGrad>,
}

impl ParamGradients {
    pub fn zeros_like(net: &PolicyNetwork) -> Self {
        let zero = |layers: &[Layer]| {
            layers
                .iter()
                .map(|l| match l {
                    Layer::Dense(d) => LayerGrad::Dense {
                        weights: Tensor::zeros(d.weights.shape().to_vec()),
                        bias: Tensor::zeros(d.bias.shape().to_vec()),
                    },
                    Layer::Conv2d(c) => {
                        LayerGrad::Conv2d { kernels: Tensor::zeros(c.kernels.shape().to_vec()) }
                    }
                    _ => LayerGrad::None,
                })
                .collect()
        };
        ParamGradients { vision: zero(&net.vision_layers), fusion: zero(&net.fusion_layers) }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.vision.iter_mut().chain(self.fusion.iter_mut()) {
            match g {
                LayerGrad::Dense { weights, bias } => {
                    weights.data_mut().iter_mut().for_each(|v| *v *= s);
                    bias.data_mut().iter_mut().for_each(|v| *v *= s);
                }
                LayerGrad::Conv2d { kernels } => {
                    kernels.data_mut().iter_mut().for_each(|v| *v *= s);
                }
                LayerGrad::None => {}
            }
        }
    }
}

/// Gradient of `sum_j out_grad_j * torque_j` with respect to both inputs.
pub fn input_gradients(
    net: &PolicyNetwork,
    trace: &ForwardTrace,
    out_grad: &Tensor,
    mode: ReluMode,
) -> Result<InputGradients> {
    backward(net, trace, out_grad, mode, None)
}

/// As [`input_gradients`] (exact mode), additionally accumulating parameter
/// gradients into `params`.
pub fn accumulate_gradients(
    net: &PolicyNetwork,
    trace: &ForwardTrace,
    out_grad: &Tensor,
    params: &mut ParamGradients,
) -> Result<InputGradients> {
    backward(net, trace, out_grad, ReluMode::Exact, Some(params))
}

fn backward(
    net: &PolicyNetwork,
    trace: &ForwardTrace,
    out_grad: &Tensor,
    mode: ReluMode,
    mut params: Option<&mut ParamGradients>,
) -> Result<InputGradients> {
    if out_grad.shape() != [net.num_joints()] {
        return Err(Error::shape(format!(
            "output gradient shape {:?} does not match {} joints",
            out_grad.shape(),
            net.num_joints()
        )));
    }
    if trace.fusion.len() != net.fusion_layers.len() || trace.vision.len() != net.vision_layers.len()
    {
        return Err(Error::shape("trace does not match network layer structure".to_string()));
    }

    let mut g = out_grad.clone();
    for (li, layer) in net.fusion_layers.iter().enumerate().rev() {
        let lt = &trace.fusion[li];
        match layer {
            Layer::Dense(d) => {
                if let Some(p) = params.as_deref_mut() {
                    if let LayerGrad::Dense { weights, bias } = &mut p.fusion[li] {
                        dense_param_grad(d, &lt.input, &g, weights, bias);
                    }
                }
                g = dense_input_grad(d, &g);
            }
            Layer::Relu => g = relu_grad(&lt.input, &g, mode),
            other => {
                return Err(Error::shape(format!("unexpected fusion layer {other:?}")));
            }
        }
    }

    // Split the concat gradient into the vision and config parts.
    let feat_dim = net.feature_dim();
    let config_grad = Tensor::vector(&g.data()[feat_dim..]);
    let mut g = Tensor::vector(&g.data()[..feat_dim]);

    for (li, layer) in net.vision_layers.iter().enumerate().rev() {
        let lt = &trace.vision[li];
        match layer {
            Layer::SpatialSoftmax(ss) => g = spatial_softmax_grad(ss, &lt.input, &lt.output, &g),
            Layer::Conv2d(c) => {
                if let Some(p) = params.as_deref_mut() {
                    if let LayerGrad::Conv2d { kernels } = &mut p.vision[li] {
                        conv_kernel_grad(c, &lt.input, &g, kernels)?;
                    }
                }
                g = conv_input_grad(c, &lt.input, &g)?;
            }
            Layer::Relu => g = relu_grad(&lt.input, &g, mode),
            other => {
                return Err(Error::shape(format!("unexpected vision layer {other:?}")));
            }
        }
    }

    Ok(InputGradients { image: g, config: config_grad })
}

fn dense_input_grad(d: &DenseLayer, g: &Tensor) -> Tensor {
    let (n_in, n_out) = (d.in_dim(), d.out_dim());
    let mut out = vec![0.0; n_in];
    for (i, oi) in out.iter_mut().enumerate() {
        let row = &d.weights.data()[i * n_out..(i + 1) * n_out];
        *oi = row.iter().zip(g.data()).map(|(w, gj)| w * gj).sum();
    }
    Tensor::vector(&out)
}

fn dense_param_grad(d: &DenseLayer, x: &Tensor, g: &Tensor, dw: &mut Tensor, db: &mut Tensor) {
    let n_out = d.out_dim();
    for i in 0..d.in_dim() {
        let xi = x.data()[i];
        if xi == 0.0 {
            continue;
        }
        let row = &mut dw.data_mut()[i * n_out..(i + 1) * n_out];
        for (w, gj) in row.iter_mut().zip(g.data()) {
            *w += xi * gj;
        }
    }
    for (b, gj) in db.data_mut().iter_mut().zip(g.data()) {
        *b += gj;
    }
}

fn relu_grad(pre: &Tensor, g: &Tensor, mode: ReluMode) -> Tensor {
    let mut out = g.clone();
    for (v, &p) in out.data_mut().iter_mut().zip(pre.data()) {
        let keep = match mode {
            ReluMode::Exact => p > 0.0,
            ReluMode::Guided => p > 0.0 && *v > 0.0,
        };
        if !keep {
            *v = 0.0;
        }
    }
    out
}

/// Gradient through the softmax expectation: for channel c with weights s and
/// outputs (ex, ey), d(ex)/d(a_p) = s_p (px_p - ex), likewise for ey.
fn spatial_softmax_grad(
    ss: &SpatialSoftmaxLayer,
    pre: &Tensor,
    points: &Tensor,
    g: &Tensor,
) -> Tensor {
    let s = spatial_softmax_weights(ss, pre);
    let mut out = Tensor::zeros(vec![ss.rows, ss.cols, ss.channels]);
    for c in 0..ss.channels {
        let (gx, gy) = (g.data()[2 * c], g.data()[2 * c + 1]);
        let (ex, ey) = (points.data()[2 * c], points.data()[2 * c + 1]);
        for r in 0..ss.rows {
            for col in 0..ss.cols {
                let sp = s.data()[s.idx3(r, col, c)];
                let i = out.idx3(r, col, c);
                out.data_mut()[i] = sp * (gx * (ss.px(col) - ex) + gy * (ss.py(r) - ey));
            }
        }
    }
    out
}

fn conv_input_grad(conv: &Conv2dLayer, x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let geo = conv.geometry(h, w)?;
    let mut out = Tensor::zeros(x.shape().to_vec());
    for oh in 0..geo.out_h {
        for ow in 0..geo.out_w {
            for ki in 0..conv.kh() {
                let Some(ih) = geo.in_row(oh, ki, h, conv.stride) else { continue };
                for kj in 0..conv.kw() {
                    let Some(iw) = geo.in_col(ow, kj, w, conv.stride) else { continue };
                    for ci in 0..conv.cin() {
                        let mut acc = 0.0;
                        for co in 0..conv.cout() {
                            acc += conv.k(ki, kj, ci, co) * g.data()[g.idx3(oh, ow, co)];
                        }
                        let i = out.idx3(ih, iw, ci);
                        out.data_mut()[i] += acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv_kernel_grad(conv: &Conv2dLayer, x: &Tensor, g: &Tensor, dk: &mut Tensor) -> Result<()> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let geo = conv.geometry(h, w)?;
    let s = conv.kernels.shape().to_vec();
    for oh in 0..geo.out_h {
        for ow in 0..geo.out_w {
            for ki in 0..conv.kh() {
                let Some(ih) = geo.in_row(oh, ki, h, conv.stride) else { continue };
                for kj in 0..conv.kw() {
                    let Some(iw) = geo.in_col(ow, kj, w, conv.stride) else { continue };
                    for ci in 0..conv.cin() {
                        let xv = x.data()[x.idx3(ih, iw, ci)];
                        if xv == 0.0 {
                            continue;
                        }
                        for co in 0..conv.cout() {
                            let idx = ((ki * s[1] + kj) * s[2] + ci) * s[3] + co;
                            dk.data_mut()[idx] += xv * g.data()[g.idx3(oh, ow, co)];
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Central finite differences of one torque output with respect to every
/// input coordinate, step 1e-5.
pub fn numeric_gradient(
    net: &PolicyNetwork,
    image: &Tensor,
    config: &Tensor,
    output_index: usize,
) -> Result<(Tensor, Tensor)> {
    const H: f64 = 1e-5;
    if output_index >= net.num_joints() {
        return Err(Error::shape(format!(
            "output index {output_index} out of range for {} joints",
            net.num_joints()
        )));
    }
    image.check_finite("numeric_gradient image")?;
    config.check_finite("numeric_gradient config")?;

    let eval = |img: &Tensor, cfg: &Tensor| -> Result<f64> {
        let (t, _) = crate::network::network_forward(net, img, cfg)?;
        Ok(t.data()[output_index])
    };

    let mut d_image = Tensor::zeros(image.shape().to_vec());
    let mut probe = image.clone();
    for i in 0..image.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + H;
        let up = eval(&probe, config)?;
        probe.data_mut()[i] = orig - H;
        let down = eval(&probe, config)?;
        probe.data_mut()[i] = orig;
        d_image.data_mut()[i] = (up - down) / (2.0 * H);
    }

    let mut d_config = Tensor::zeros(config.shape().to_vec());
    let mut probe = config.clone();
    for i in 0..config.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + H;
        let up = eval(image, &probe)?;
        probe.data_mut()[i] = orig - H;
        let down = eval(image, &probe)?;
        probe.data_mut()[i] = orig;
        d_config.data_mut()[i] = (up - down) / (2.0 * H);
    }

    Ok((d_image, d_config))
}
