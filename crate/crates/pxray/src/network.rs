//! Layer definitions, the two-branch visuomotor policy network, and the
//! deterministic forward pass with per-layer activation caching.
//!
//! Architecture: a vision stack (Conv2D/ReLU ending in a spatial softmax)
//! produces per-channel feature points, which are concatenated with the
//! joint configuration vector and pushed through a dense stack whose final
//! layer outputs one motor torque per joint.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fully-connected layer. `weights` is `[in, out]` row-major, `bias` is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::shape(format!(
                "dense weights must be 2-D, got {:?}",
                weights.shape()
            )));
        }
        if bias.shape() != [weights.shape()[1]] {
            return Err(Error::shape(format!(
                "dense bias shape {:?} does not match output dim {}",
                bias.shape(),
                weights.shape()[1]
            )));
        }
        Ok(DenseLayer { weights, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Weight w_ij for input i, output j.
    #[inline]
    pub fn w(&self, i: usize, j: usize) -> f64 {
        self.weights.data()[i * self.out_dim() + j]
    }
}

/// Zero-padding mode for convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// 2-D convolution (cross-correlation). `kernels` is `[kh, kw, cin, cout]`
/// row-major; no bias term.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    pub kernels: Tensor,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2dLayer {
    pub fn new(kernels: Tensor, stride: usize, padding: Padding) -> Result<Self> {
        if kernels.shape().len() != 4 {
            return Err(Error::shape(format!(
                "conv kernels must be 4-D [kh,kw,cin,cout], got {:?}",
                kernels.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv stride must be >= 1".to_string()));
        }
        Ok(Conv2dLayer { kernels, stride, padding })
    }

    pub fn kh(&self) -> usize {
        self.kernels.shape()[0]
    }
    pub fn kw(&self) -> usize {
        self.kernels.shape()[1]
    }
    pub fn cin(&self) -> usize {
        self.kernels.shape()[2]
    }
    pub fn cout(&self) -> usize {
        self.kernels.shape()[3]
    }

    /// Kernel value at (ki, kj, ci, co).
    #[inline]
    pub fn k(&self, ki: usize, kj: usize, ci: usize, co: usize) -> f64 {
        let s = self.kernels.shape();
        self.kernels.data()[((ki * s[1] + kj) * s[2] + ci) * s[3] + co]
    }

    /// Output spatial dims and top/left padding for an input of `(h, w)`.
    pub fn geometry(&self, h: usize, w: usize) -> Result<ConvGeometry> {
        match self.padding {
            Padding::Valid => {
                if self.kh() > h || self.kw() > w {
                    return Err(Error::shape(format!(
                        "conv kernel {}x{} larger than input {}x{} with valid padding",
                        self.kh(),
                        self.kw(),
                        h,
                        w
                    )));
                }
                Ok(ConvGeometry {
                    out_h: (h - self.kh()) / self.stride + 1,
                    out_w: (w - self.kw()) / self.stride + 1,
                    pad_top: 0,
                    pad_left: 0,
                })
            }
            Padding::Same => {
                let out_h = h.div_ceil(self.stride);
                let out_w = w.div_ceil(self.stride);
                let pad_h = ((out_h - 1) * self.stride + self.kh()).saturating_sub(h);
                let pad_w = ((out_w - 1) * self.stride + self.kw()).saturating_sub(w);
                Ok(ConvGeometry { out_h, out_w, pad_top: pad_h / 2, pad_left: pad_w / 2 })
            }
        }
    }
}

/// Resolved spatial geometry of one convolution application.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    /// Input row for output row `oh` and kernel row `ki`; `None` if it falls
    /// in the zero-padding region.
    #[inline]
    pub fn in_row(&self, oh: usize, ki: usize, h: usize, stride: usize) -> Option<usize> {
        let r = (oh * stride + ki) as isize - self.pad_top as isize;
        (r >= 0 && (r as usize) < h).then_some(r as usize)
    }

    #[inline]
    pub fn in_col(&self, ow: usize, kj: usize, w: usize, stride: usize) -> Option<usize> {
        let c = (ow * stride + kj) as isize - self.pad_left as isize;
        (c >= 0 && (c as usize) < w).then_some(c as usize)
    }
}

/// Spatial softmax over an `[rows, cols, channels]` feature map, producing
/// one expected (x, y) coordinate pair per channel, in `[-1, 1]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialSoftmaxLayer {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl SpatialSoftmaxLayer {
    /// Normalized x coordinate of a column (columns span [-1, 1], center 0).
    #[inline]
    pub fn px(&self, col: usize) -> f64 {
        grid_coord(col, self.cols)
    }

    /// Normalized y coordinate of a row.
    #[inline]
    pub fn py(&self, row: usize) -> f64 {
        grid_coord(row, self.rows)
    }

    pub fn out_dim(&self) -> usize {
        2 * self.channels
    }
}

#[inline]
fn grid_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// One network layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Conv2d(Conv2dLayer),
    Relu,
    SpatialSoftmax(SpatialSoftmaxLayer),
    /// Marker for the vision/config join; segment_dims must sum to the
    /// joined vector's length.
    Concat { segment_dims: Vec<usize> },
}

impl Layer {
    /// Applies the layer to an already-assembled input tensor.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(d) => dense_forward(d, x),
            Layer::Conv2d(c) => conv2d_forward(c, x),
            Layer::Relu => Ok(relu_forward(x)),
            Layer::SpatialSoftmax(s) => spatial_softmax_forward(s, x),
            Layer::Concat { segment_dims } => {
                let total: usize = segment_dims.iter().sum();
                if x.len() != total {
                    return Err(Error::shape(format!(
                        "concat segment dims {segment_dims:?} sum to {total}, input has {}",
                        x.len()
                    )));
                }
                Ok(x.clone())
            }
        }
    }
}

/// Named index range `[lo, hi)` over the configuration vector.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGroup {
    pub name: String,
    pub lo: usize,
    pub hi: usize,
}

impl InputGroup {
    pub fn new(name: impl Into<String>, lo: usize, hi: usize) -> Self {
        InputGroup { name: name.into(), lo, hi }
    }
}

/// Two-branch visuomotor policy: vision stack -> feature points, concatenated
/// with the configuration vector, then a dense fusion stack ending in one
/// torque per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork {
    pub image_shape: (usize, usize, usize),
    pub config_dim: usize,
    pub input_groups: Vec<InputGroup>,
    pub vision_layers: Vec<Layer>,
    pub fusion_layers: Vec<Layer>,
}

impl PolicyNetwork {
    pub fn new(
        image_shape: (usize, usize, usize),
        config_dim: usize,
        input_groups: Vec<InputGroup>,
        vision_layers: Vec<Layer>,
        fusion_layers: Vec<Layer>,
    ) -> Result<Self> {
        let net = PolicyNetwork { image_shape, config_dim, input_groups, vision_layers, fusion_layers };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        // Vision branch: Conv2d/Relu ending in exactly one SpatialSoftmax.
        let (mut h, mut w, mut c) = self.image_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::shape("image shape has a zero dimension".to_string()));
        }
        let Some((last, body)) = self.vision_layers.split_last() else {
            return Err(Error::shape("vision branch is empty".to_string()));
        };
        for (i, layer) in body.iter().enumerate() {
            match layer {
                Layer::Conv2d(conv) => {
                    if conv.cin() != c {
                        return Err(Error::shape(format!(
                            "vision layer {i}: conv expects {} channels, gets {c}",
                            conv.cin()
                        )));
                    }
                    let g = conv.geometry(h, w)?;
                    h = g.out_h;
                    w = g.out_w;
                    c = conv.cout();
                }
                Layer::Relu => {}
                other => {
                    return Err(Error::shape(format!(
                        "vision layer {i}: expected conv2d or relu, got {other:?}"
                    )));
                }
            }
        }
        let Layer::SpatialSoftmax(ss) = last else {
            return Err(Error::shape("vision branch must end in spatial softmax".to_string()));
        };
        if (ss.rows, ss.cols, ss.channels) != (h, w, c) {
            return Err(Error::shape(format!(
                "spatial softmax declared {}x{}x{}, vision stack produces {h}x{w}x{c}",
                ss.rows, ss.cols, ss.channels
            )));
        }

        // Fusion branch: Dense/Relu, first dense input = 2*channels + config_dim,
        // last layer a dense with no trailing activation.
        let mut dim = ss.out_dim() + self.config_dim;
        if self.fusion_layers.is_empty() {
            return Err(Error::shape("fusion branch is empty".to_string()));
        }
        for (i, layer) in self.fusion_layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    if d.in_dim() != dim {
                        return Err(Error::shape(format!(
                            "fusion layer {i}: dense expects input dim {}, gets {dim}",
                            d.in_dim()
                        )));
                    }
                    dim = d.out_dim();
                }
                Layer::Relu => {}
                other => {
                    return Err(Error::shape(format!(
                        "fusion layer {i}: expected dense or relu, got {other:?}"
                    )));
                }
            }
        }
        if !matches!(self.fusion_layers.last(), Some(Layer::Dense(_))) {
            return Err(Error::shape("final fusion layer must be dense".to_string()));
        }

        // Input groups: disjoint and covering [0, config_dim).
        let mut covered = vec![false; self.config_dim];
        for g in &self.input_groups {
            if g.lo >= g.hi || g.hi > self.config_dim {
                return Err(Error::shape(format!(
                    "input group {:?} range [{}, {}) invalid for config dim {}",
                    g.name, g.lo, g.hi, self.config_dim
                )));
            }
            for slot in &mut covered[g.lo..g.hi] {
                if *slot {
                    return Err(Error::shape(format!(
                        "input group {:?} overlaps another group",
                        g.name
                    )));
                }
                *slot = true;
            }
        }
        if covered.iter().any(|&v| !v) {
            return Err(Error::shape("input groups do not cover the config vector".to_string()));
        }
        Ok(())
    }

    /// The spatial softmax closing the vision branch.
    pub fn spatial_softmax(&self) -> &SpatialSoftmaxLayer {
        match self.vision_layers.last() {
            Some(Layer::SpatialSoftmax(ss)) => ss,
            _ => unreachable!("validated at construction"),
        }
    }

    /// Dimension of the vision branch output (2 coordinates per channel).
    pub fn feature_dim(&self) -> usize {
        self.spatial_softmax().out_dim()
    }

    pub fn num_joints(&self) -> usize {
        match self.fusion_layers.last() {
            Some(Layer::Dense(d)) => d.out_dim(),
            _ => unreachable!("validated at construction"),
        }
    }

    /// Network layer count including the implicit concat step.
    pub fn layer_count(&self) -> usize {
        self.vision_layers.len() + 1 + self.fusion_layers.len()
    }
}

/// Input and output activations of one layer, cached during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub input: Tensor,
    pub output: Tensor,
}

/// Per-layer activations from one forward pass, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub vision: Vec<LayerTrace>,
    /// Joined [feature points, configuration] vector fed to the fusion stack.
    pub concat: Tensor,
    pub fusion: Vec<LayerTrace>,
}

impl ForwardTrace {
    /// Trace layer count including the concat step.
    pub fn layer_count(&self) -> usize {
        self.vision.len() + 1 + self.fusion.len()
    }

    /// Final network output (motor torques).
    pub fn torques(&self) -> &Tensor {
        &self.fusion.last().expect("fusion branch is never empty").output
    }

    /// Vision branch output (the feature points).
    pub fn feature_points(&self) -> &Tensor {
        &self.vision.last().expect("vision branch is never empty").output
    }
}

/// y_j = sum_i x_i w_ij + b_j.
pub fn dense_forward(layer: &DenseLayer, x: &Tensor) -> Result<Tensor> {
    if x.shape() != [layer.in_dim()] {
        return Err(Error::shape(format!(
            "dense expects input [{}], got {:?}",
            layer.in_dim(),
            x.shape()
        )));
    }
    let (n_in, n_out) = (layer.in_dim(), layer.out_dim());
    let mut y = layer.bias.data().to_vec();
    for i in 0..n_in {
        let xi = x.data()[i];
        if xi == 0.0 {
            continue;
        }
        let row = &layer.weights.data()[i * n_out..(i + 1) * n_out];
        for (yj, wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
    Tensor::new(vec![n_out], y)
}

/// Standard cross-correlation over an `[H, W, Cin]` input.
pub fn conv2d_forward(layer: &Conv2dLayer, x: &Tensor) -> Result<Tensor> {
    let [h, w, cin] = *x.shape() else {
        return Err(Error::shape(format!("conv expects [H,W,C] input, got {:?}", x.shape())));
    };
    if cin != layer.cin() {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {cin}",
            layer.cin()
        )));
    }
    let g = layer.geometry(h, w)?;
    let cout = layer.cout();
    let mut out = Tensor::zeros(vec![g.out_h, g.out_w, cout]);
    for oh in 0..g.out_h {
        for ow in 0..g.out_w {
            for ki in 0..layer.kh() {
                let Some(ih) = g.in_row(oh, ki, h, layer.stride) else { continue };
                for kj in 0..layer.kw() {
                    let Some(iw) = g.in_col(ow, kj, w, layer.stride) else { continue };
                    for ci in 0..cin {
                        let xv = x.data()[x.idx3(ih, iw, ci)];
                        if xv == 0.0 {
                            continue;
                        }
                        for co in 0..cout {
                            let oi = out.idx3(oh, ow, co);
                            out.data_mut()[oi] += xv * layer.k(ki, kj, ci, co);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Elementwise max(x, 0).
pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Per-channel softmax over all pixels followed by the expected normalized
/// (x, y) coordinate; output is `[x_0, y_0, x_1, y_1, ...]`.
pub fn spatial_softmax_forward(layer: &SpatialSoftmaxLayer, x: &Tensor) -> Result<Tensor> {
    if x.shape() != [layer.rows, layer.cols, layer.channels] {
        return Err(Error::shape(format!(
            "spatial softmax expects [{},{},{}], got {:?}",
            layer.rows, layer.cols, layer.channels,
            x.shape()
        )));
    }
    let weights = spatial_softmax_weights(layer, x);
    let mut out = vec![0.0; layer.out_dim()];
    for c in 0..layer.channels {
        let (mut ex, mut ey) = (0.0, 0.0);
        for r in 0..layer.rows {
            for col in 0..layer.cols {
                let s = weights.data()[weights.idx3(r, col, c)];
                ex += s * layer.px(col);
                ey += s * layer.py(r);
            }
        }
        out[2 * c] = ex;
        out[2 * c + 1] = ey;
    }
    Tensor::new(vec![layer.out_dim()], out)
}

/// Per-channel softmax weights over all pixels (max-subtracted for
/// stability). Shared by the forward pass, the gradient, and the relevance
/// redistribution rule.
pub fn spatial_softmax_weights(layer: &SpatialSoftmaxLayer, x: &Tensor) -> Tensor {
    let mut s = Tensor::zeros(vec![layer.rows, layer.cols, layer.channels]);
    for c in 0..layer.channels {
        let mut max = f64::NEG_INFINITY;
        for r in 0..layer.rows {
            for col in 0..layer.cols {
                max = max.max(x.data()[x.idx3(r, col, c)]);
            }
        }
        let mut sum = 0.0;
        for r in 0..layer.rows {
            for col in 0..layer.cols {
                let e = (x.data()[x.idx3(r, col, c)] - max).exp();
                let i = s.idx3(r, col, c);
                s.data_mut()[i] = e;
                sum += e;
            }
        }
        for r in 0..layer.rows {
            for col in 0..layer.cols {
                let i = s.idx3(r, col, c);
                s.data_mut()[i] /= sum;
            }
        }
    }
    s
}

/// Runs the full two-branch forward pass, caching every layer's activations.
pub fn network_forward(
    net: &PolicyNetwork,
    image: &Tensor,
    config: &Tensor,
) -> Result<(Tensor, ForwardTrace)> {
    let (h, w, c) = net.image_shape;
    if image.shape() != [h, w, c] {
        return Err(Error::shape(format!(
            "image shape {:?} does not match network declaration [{h}, {w}, {c}]",
            image.shape()
        )));
    }
    if config.shape() != [net.config_dim] {
        return Err(Error::shape(format!(
            "config shape {:?} does not match network declaration [{}]",
            config.shape(),
            net.config_dim
        )));
    }
    image.check_finite("network_forward image")?;
    config.check_finite("network_forward config")?;

    let mut vision = Vec::with_capacity(net.vision_layers.len());
    let mut cur = image.clone();
    for layer in &net.vision_layers {
        let out = layer.forward(&cur)?;
        vision.push(LayerTrace { input: cur, output: out.clone() });
        cur = out;
    }

    let mut joined = cur.data().to_vec();
    joined.extend_from_slice(config.data());
    let concat = Tensor::new(vec![joined.len()], joined)?;

    let mut fusion = Vec::with_capacity(net.fusion_layers.len());
    let mut cur = concat.clone();
    for layer in &net.fusion_layers {
        let out = layer.forward(&cur)?;
        fusion.push(LayerTrace { input: cur, output: out.clone() });
        cur = out;
    }

    Ok((cur, ForwardTrace { vision, concat, fusion }))
}
