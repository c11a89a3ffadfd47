//! Portable JSON weight files.
//!
//! Floats are written in scientific notation with 17 significant digits so
//! that save/load round-trips every f64 exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::network::{
    Conv2dLayer, DenseLayer, InputGroup, Layer, Padding, PolicyNetwork, SpatialSoftmaxLayer,
};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: i64 = 1;
const SUPPORTED_TYPES: &str = "dense, conv2d, relu, spatial_softmax";

/// Serializes a network to the JSON weight-file format.
pub fn serialize_network(net: &PolicyNetwork) -> Result<String> {
    let mut out = String::new();
    out.push_str("{\n");
    let _ = writeln!(out, "  \"version\": {FORMAT_VERSION},");
    let (h, w, c) = net.image_shape;
    let _ = writeln!(out, "  \"image_shape\": [{h}, {w}, {c}],");
    let _ = writeln!(out, "  \"config_dim\": {},", net.config_dim);

    let mut groups: Vec<&InputGroup> = net.input_groups.iter().collect();
    groups.sort_by_key(|g| g.lo);
    out.push_str("  \"input_groups\": {");
    for (i, g) in groups.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "\"{}\": [{}, {}]", g.name, g.lo, g.hi);
    }
    out.push_str("},\n");

    write_layer_list(&mut out, "vision_layers", &net.vision_layers)?;
    out.push_str(",\n");
    write_layer_list(&mut out, "fusion_layers", &net.fusion_layers)?;
    out.push_str("\n}\n");
    Ok(out)
}

fn write_layer_list(out: &mut String, key: &str, layers: &[Layer]) -> Result<()> {
    let _ = writeln!(out, "  \"{key}\": [");
    for (i, layer) in layers.iter().enumerate() {
        out.push_str("    ");
        write_layer(out, layer)?;
        if i + 1 < layers.len() {
            out.push(',');
        }
        out.push('\n');
    }
    out.push_str("  ]");
    Ok(())
}

fn write_layer(out: &mut String, layer: &Layer) -> Result<()> {
    match layer {
        Layer::Dense(d) => {
            d.weights.check_finite("dense weights")?;
            d.bias.check_finite("dense bias")?;
            let _ = write!(
                out,
                "{{\"type\": \"dense\", \"in\": {}, \"out\": {}, \"weights\": {}, \"bias\": {}}}",
                d.in_dim(),
                d.out_dim(),
                float_array(d.weights.data()),
                float_array(d.bias.data())
            );
        }
        Layer::Conv2d(c) => {
            c.kernels.check_finite("conv kernels")?;
            let pad = match c.padding {
                Padding::Valid => "valid",
                Padding::Same => "same",
            };
            let _ = write!(
                out,
                "{{\"type\": \"conv2d\", \"kh\": {}, \"kw\": {}, \"cin\": {}, \"cout\": {}, \
                 \"stride\": {}, \"padding\": \"{pad}\", \"weights\": {}}}",
                c.kh(),
                c.kw(),
                c.cin(),
                c.cout(),
                c.stride,
                float_array(c.kernels.data())
            );
        }
        Layer::Relu => out.push_str("{\"type\": \"relu\"}"),
        Layer::SpatialSoftmax(s) => {
            let _ = write!(
                out,
                "{{\"type\": \"spatial_softmax\", \"rows\": {}, \"cols\": {}, \"channels\": {}}}",
                s.rows, s.cols, s.channels
            );
        }
        Layer::Concat { .. } => {
            return Err(Error::shape("concat layers are implicit and never serialized".to_string()));
        }
    }
    Ok(())
}

fn float_array(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 24 + 2);
    s.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "{v:.16e}");
    }
    s.push(']');
    s
}

#[derive(Deserialize)]
struct WeightFile {
    version: i64,
    image_shape: [usize; 3],
    config_dim: usize,
    input_groups: BTreeMap<String, [usize; 2]>,
    vision_layers: Vec<LayerSpec>,
    fusion_layers: Vec<LayerSpec>,
}

#[derive(Deserialize)]
struct LayerSpec {
    #[serde(rename = "type")]
    kind: String,
    #[serde(rename = "in")]
    in_dim: Option<usize>,
    out: Option<usize>,
    weights: Option<Vec<f64>>,
    bias: Option<Vec<f64>>,
    kh: Option<usize>,
    kw: Option<usize>,
    cin: Option<usize>,
    cout: Option<usize>,
    stride: Option<usize>,
    padding: Option<String>,
    rows: Option<usize>,
    cols: Option<usize>,
    channels: Option<usize>,
}

/// Parses the JSON weight-file format back into a validated network.
pub fn parse_network(source: &str, origin: &str) -> Result<PolicyNetwork> {
    let file: WeightFile = serde_json::from_str(source).map_err(|e| Error::Parse {
        path: origin.to_string(),
        detail: e.to_string(),
    })?;
    if file.version != FORMAT_VERSION {
        return Err(Error::Version { found: file.version, supported: FORMAT_VERSION });
    }
    let mut groups: Vec<InputGroup> = file
        .input_groups
        .iter()
        .map(|(name, r)| InputGroup::new(name.clone(), r[0], r[1]))
        .collect();
    groups.sort_by_key(|g| g.lo);

    let vision = parse_layers(&file.vision_layers, "vision")?;
    let fusion = parse_layers(&file.fusion_layers, "fusion")?;
    PolicyNetwork::new(
        (file.image_shape[0], file.image_shape[1], file.image_shape[2]),
        file.config_dim,
        groups,
        vision,
        fusion,
    )
}

fn parse_layers(specs: &[LayerSpec], branch: &str) -> Result<Vec<Layer>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| parse_layer(spec, &format!("{branch} layer {i}")))
        .collect()
}

fn parse_layer(spec: &LayerSpec, label: &str) -> Result<Layer> {
    let missing = |field: &str| Error::Dimension {
        layer: label.to_string(),
        detail: format!("missing field {field:?}"),
    };
    match spec.kind.as_str() {
        "dense" => {
            let in_dim = spec.in_dim.ok_or_else(|| missing("in"))?;
            let out = spec.out.ok_or_else(|| missing("out"))?;
            let weights = spec.weights.as_ref().ok_or_else(|| missing("weights"))?;
            let bias = spec.bias.as_ref().ok_or_else(|| missing("bias"))?;
            if weights.len() != in_dim * out {
                return Err(Error::Dimension {
                    layer: label.to_string(),
                    detail: format!(
                        "weights array has {} values, expected {}x{} = {}",
                        weights.len(),
                        in_dim,
                        out,
                        in_dim * out
                    ),
                });
            }
            if bias.len() != out {
                return Err(Error::Dimension {
                    layer: label.to_string(),
                    detail: format!("bias array has {} values, expected {out}", bias.len()),
                });
            }
            let d = DenseLayer::new(
                Tensor::new(vec![in_dim, out], weights.clone())?,
                Tensor::new(vec![out], bias.clone())?,
            )?;
            d.weights.check_finite(label)?;
            d.bias.check_finite(label)?;
            Ok(Layer::Dense(d))
        }
        "conv2d" => {
            let kh = spec.kh.ok_or_else(|| missing("kh"))?;
            let kw = spec.kw.ok_or_else(|| missing("kw"))?;
            let cin = spec.cin.ok_or_else(|| missing("cin"))?;
            let cout = spec.cout.ok_or_else(|| missing("cout"))?;
            let stride = spec.stride.ok_or_else(|| missing("stride"))?;
            let weights = spec.weights.as_ref().ok_or_else(|| missing("weights"))?;
            if weights.len() != kh * kw * cin * cout {
                return Err(Error::Dimension {
                    layer: label.to_string(),
                    detail: format!(
                        "weights array has {} values, expected {kh}x{kw}x{cin}x{cout} = {}",
                        weights.len(),
                        kh * kw * cin * cout
                    ),
                });
            }
            let padding = match spec.padding.as_deref() {
                Some("valid") | None => Padding::Valid,
                Some("same") => Padding::Same,
                Some(other) => {
                    return Err(Error::Dimension {
                        layer: label.to_string(),
                        detail: format!("unknown padding {other:?} (valid, same)"),
                    });
                }
            };
            let c = Conv2dLayer::new(
                Tensor::new(vec![kh, kw, cin, cout], weights.clone())?,
                stride,
                padding,
            )?;
            c.kernels.check_finite(label)?;
            Ok(Layer::Conv2d(c))
        }
        "relu" => Ok(Layer::Relu),
        "spatial_softmax" => {
            let rows = spec.rows.ok_or_else(|| missing("rows"))?;
            let cols = spec.cols.ok_or_else(|| missing("cols"))?;
            let channels = spec.channels.ok_or_else(|| missing("channels"))?;
            Ok(Layer::SpatialSoftmax(SpatialSoftmaxLayer { rows, cols, channels }))
        }
        other => Err(Error::UnknownLayerType {
            found: other.to_string(),
            supported: SUPPORTED_TYPES,
        }),
    }
}

/// Writes a network to `path` in the JSON weight-file format.
pub fn save_weights(net: &PolicyNetwork, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let body = serialize_network(net)?;
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads and validates a network from a JSON weight file.
pub fn load_weights(path: impl AsRef<Path>) -> Result<PolicyNetwork> {
    let path = path.as_ref();
    let source =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_network(&source, &path.display().to_string())
}
